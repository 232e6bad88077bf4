import itertools
import math

import numpy as np
import pytest

from stackad import csp
from stackad.csp import (
    ClusteringError,
    PromptTemplateSet,
    build_prompt,
    build_test_prompts,
    category_text_features,
    cluster_score,
    kmeans,
    select_clusters,
)
from stackad.mock import MockTextStore


def all_partitions(n, k):
    """Every assignment of n items to exactly k non-empty unlabeled clusters."""

    def rec(i, used):
        if i == n:
            if used == k:
                yield []
            return
        for c in range(min(used + 1, k)):
            for rest in rec(i + 1, max(used, c + 1)):
                yield [c] + rest

    for assignment in rec(0, 0):
        yield np.asarray(assignment)


def brute_force_inertia(points, k):
    best = math.inf
    for assignment in all_partitions(len(points), k):
        total = 0.0
        for c in range(k):
            members = points[assignment == c]
            centroid = members.mean(axis=0)
            total += float(((members - centroid) ** 2).sum())
        best = min(best, total)
    return best


def score_oracle(points, assignment, n, lam=0.1, base=math.e):
    """Plain-loop recomputation of the penalized intra-cluster score."""
    total = 0.0
    for c in range(n):
        members = [points[i] for i in range(len(points)) if assignment[i] == c]
        centroid = [sum(col) / len(members) for col in zip(*members)]
        acc = 0.0
        for m in members:
            acc += sum((a - b) ** 2 for a, b in zip(m, centroid))
        total += acc / len(members)
    return total + lam * base**n


class TestBuildPrompt:
    def test_single_class(self):
        assert build_prompt("damaged", ["cable"]) == "a photo of a damaged cable"

    def test_stacked(self):
        assert (
            build_prompt("damaged", ["cable", "wood", "tile"])
            == "a photo of a damaged cable wood tile"
        )

    def test_empty_state_collapses(self):
        assert build_prompt("", ["capsule"]) == "a photo of a capsule"

    def test_empty_classes_rejected(self):
        with pytest.raises(ValueError, match="non-empty"):
            build_prompt("damaged", [])

    def test_injective_over_state_and_class_order(self):
        states = list(csp.DEFAULT_NORMAL_STATES + csp.DEFAULT_ABNORMAL_STATES)
        names = ["cable", "wood", "tile", "screw"]
        seen = {}
        for state in states:
            for r in (1, 2, 3):
                for combo in itertools.permutations(names, r):
                    p = build_prompt(state, list(combo))
                    assert p not in seen, f"collision: {seen[p]} vs {(state, combo)}"
                    seen[p] = (state, combo)

    def test_template_validation(self):
        with pytest.raises(ValueError, match="exactly once"):
            PromptTemplateSet(template="a photo of [cls]")
        with pytest.raises(ValueError, match="non-empty"):
            PromptTemplateSet(normal_states=())


class TestCategoryTextFeatures:
    def test_deterministic_and_unit(self):
        store = MockTextStore(3, 8, groups={"g": ["aa", "bb"]})
        f1 = category_text_features(["aa", "bb"], store)
        f2 = category_text_features(["aa", "bb"], store)
        assert np.array_equal(f1, f2)
        assert np.allclose(np.linalg.norm(f1, axis=1), 1.0, atol=1e-6)

    def test_distinct_required(self):
        store = MockTextStore(3, 8)
        with pytest.raises(ValueError, match="distinct"):
            category_text_features(["aa", "aa"], store)

    def test_group_structure(self, bench_dataset):
        store = bench_dataset["store"]
        cats = ["boltz", "gearix", "weavon", "feltra"]
        f = category_text_features(cats, store)
        cos = f @ f.T
        assert cos[0, 1] > 0.8 and cos[2, 3] > 0.8
        assert cos[0, 2] < 0.0 and cos[1, 3] < 0.0


class TestKMeans:
    def test_singleton_clusters(self, rng):
        pts = rng.standard_normal((5, 3))
        res = kmeans(pts, k=5, seed=0)
        assert res.inertia == pytest.approx(0.0, abs=1e-12)
        assert sorted(res.assignment) == list(range(5))

    def test_identical_points_k1(self):
        pts = np.ones((4, 2)) * 0.7
        res = kmeans(pts, k=1, seed=0)
        assert np.allclose(res.centroids[0], 0.7)
        assert res.inertia == pytest.approx(0.0)

    def test_identical_points_k2_survives(self):
        pts = np.ones((4, 2))
        res = kmeans(pts, k=2, seed=0)
        assert np.all(np.isfinite(res.centroids))
        assert set(res.assignment) == {0, 1}

    def test_planted_triads_match_brute_force(self):
        rng = np.random.default_rng(5)
        a = rng.standard_normal((3, 2)) * 0.05 + np.array([0.0, 0.0])
        b = rng.standard_normal((3, 2)) * 0.05 + np.array([5.0, 5.0])
        pts = np.vstack([a, b])
        res = kmeans(pts, k=2, seed=1)
        assert res.inertia == pytest.approx(brute_force_inertia(pts, 2), rel=1e-9)
        groups = [set(np.where(res.assignment == c)[0]) for c in range(2)]
        assert {frozenset(g) for g in groups} == {frozenset({0, 1, 2}), frozenset({3, 4, 5})}

    def test_deterministic_given_seed(self, rng):
        pts = rng.standard_normal((8, 3))
        r1 = kmeans(pts, 3, seed=42)
        r2 = kmeans(pts, 3, seed=42)
        assert np.array_equal(r1.assignment, r2.assignment)
        assert r1.inertia == r2.inertia

    def test_k_too_large_rejected(self, rng):
        with pytest.raises(ClusteringError, match="out of range"):
            kmeans(rng.standard_normal((3, 2)), 4, seed=0)

    def test_non_finite_rejected(self):
        pts = np.array([[1.0, np.nan], [0.0, 1.0]])
        with pytest.raises(ClusteringError, match="non-finite"):
            kmeans(pts, 1, seed=0)

    def test_centroids_are_member_means(self, rng):
        pts = rng.standard_normal((7, 4))
        res = kmeans(pts, 3, seed=9)
        for c in range(3):
            members = pts[res.assignment == c]
            assert np.allclose(res.centroids[c], members.mean(axis=0), atol=1e-6)

    def test_scaling_preserves_assignment(self, rng):
        pts = rng.standard_normal((6, 3))
        r1 = kmeans(pts, 2, seed=3)
        r2 = kmeans(pts * 3.7, 2, seed=3)
        assert np.array_equal(r1.assignment, r2.assignment)
        # intra-cluster term scales with the square of the constant
        s1 = cluster_score(pts, r1.assignment, 2, lambda_coeff=0.0)
        s2 = cluster_score(pts * 3.7, r2.assignment, 2, lambda_coeff=0.0)
        assert s2 == pytest.approx(3.7**2 * s1, rel=1e-9)


ONE_D = np.array([[0.0], [0.2], [1.0]])
TWO_CLUSTER_ASSIGN = np.array([0, 0, 1])


class TestClusterScore:
    def test_two_cluster_hand_value(self):
        score = cluster_score(ONE_D, TWO_CLUSTER_ASSIGN, 2)
        assert score == pytest.approx(0.01 + 0.1 * math.e**2, abs=1e-12)
        assert score == pytest.approx(0.74891, abs=1e-5)

    def test_single_cluster_hand_value(self):
        score = cluster_score(ONE_D, np.zeros(3, dtype=int), 1)
        expected = (0.16 + 0.04 + 0.36) / 3 + 0.1 * math.e
        assert score == pytest.approx(expected, abs=1e-12)
        assert score == pytest.approx(0.45850, abs=1e-5)

    def test_singletons_pure_penalty(self, rng):
        pts = rng.standard_normal((5, 2))
        score = cluster_score(pts, np.arange(5), 5)
        assert score == pytest.approx(0.1 * math.e**5, abs=1e-12)

    def test_empty_cluster_rejected(self):
        with pytest.raises(ClusteringError, match="empty"):
            cluster_score(ONE_D, np.array([0, 0, 0]), 2)

    def test_matches_loop_oracle(self):
        for trial in range(30):
            rng = np.random.default_rng(trial)
            n_pts = int(rng.integers(2, 9))
            dim = int(rng.integers(1, 4))
            pts = rng.standard_normal((n_pts, dim))
            k = int(rng.integers(1, n_pts + 1))
            assignment = np.array(list(rng.integers(0, k, n_pts)))
            for c in range(k):  # force non-empty
                if not np.any(assignment == c):
                    assignment[int(rng.integers(0, n_pts))] = c
            if len(set(assignment)) < k:
                continue
            impl = cluster_score(pts, assignment, k)
            orac = score_oracle(pts.tolist(), assignment, k)
            assert impl == pytest.approx(orac, abs=1e-9)

    def test_decomposition_invariant(self, rng):
        pts = rng.standard_normal((7, 3))
        res = kmeans(pts, 3, seed=0)
        lam = 0.35
        score = cluster_score(pts, res.assignment, 3, lambda_coeff=lam)
        assert score - lam * math.e**3 == pytest.approx(
            score_oracle(pts.tolist(), res.assignment, 3, lam=0.0), abs=1e-9
        )


class TestSelectClusters:
    def test_one_d_example(self):
        model = select_clusters(ONE_D, ["x", "y", "z"], k_max=3, seed=0)
        assert model.n_star == 1
        assert model.score_table[1] == pytest.approx(0.45850, abs=1e-5)
        assert model.score_table[2] == pytest.approx(0.74891, abs=1e-5)
        assert model.score_table[3] == pytest.approx(0.1 * math.e**3, abs=1e-9)

    def test_shared_embedding_selects_one(self):
        pts = np.tile([[0.3, 0.4]], (5, 1))
        model = select_clusters(pts, list("abcde"), k_max=5, seed=0)
        assert model.n_star == 1

    def test_argmin_invariant(self):
        for trial in range(20):
            rng = np.random.default_rng(100 + trial)
            n = int(rng.integers(2, 8))
            pts = rng.standard_normal((n, 3))
            model = select_clusters(pts, [f"c{i}" for i in range(n)], k_max=n, seed=trial)
            best = min(model.score_table, key=lambda k: (model.score_table[k], k))
            assert model.n_star == best

    def test_member_order_descending_similarity(self, bench_dataset):
        store = bench_dataset["store"]
        cats = ["boltz", "gearix", "weavon", "feltra"]
        feats = category_text_features(cats, store)
        model = select_clusters(feats, cats, k_max=4, seed=0)
        assert model.n_star == 2
        for c in range(2):
            members = model.member_order[c]
            centroid = model.centroids[c] / np.linalg.norm(model.centroids[c])
            sims = []
            for m in members:
                row = feats[cats.index(m)]
                sims.append(float(row @ centroid))
            for i in range(len(members) - 1):
                assert sims[i] >= sims[i + 1] - 1e-9
                if abs(sims[i] - sims[i + 1]) < 1e-9:
                    assert members[i] < members[i + 1]

    def test_every_category_assigned(self, bench_dataset):
        store = bench_dataset["store"]
        cats = ["boltz", "gearix", "weavon", "feltra"]
        feats = category_text_features(cats, store)
        model = select_clusters(feats, cats, k_max=3, seed=0)
        assert sorted(model.assignment) == sorted(cats)
        flat = [m for c in model.member_order for m in c]
        assert sorted(flat) == sorted(cats)

    def test_json_round_trip(self, bench_dataset, tmp_path):
        store = bench_dataset["store"]
        cats = ["boltz", "gearix", "weavon", "feltra"]
        feats = category_text_features(cats, store)
        model = select_clusters(feats, cats, k_max=4, seed=0)
        path = str(tmp_path / "cm.json")
        model.save(path)
        back = csp.ClusterModel.load(path)
        assert back.n_star == model.n_star
        assert back.assignment == model.assignment
        assert back.member_order == model.member_order
        assert np.allclose(back.centroids, model.centroids)
        assert back.score_table == pytest.approx(model.score_table)


class TestTestPrompts:
    def _model(self, members):
        return csp.ClusterModel(
            n_star=len(members),
            assignment={m: i for i, ms in enumerate(members) for m in ms},
            centroids=np.zeros((len(members), 4)),
            member_order=[list(ms) for ms in members],
            stacked_prompt_keys=[f"cluster/{i}" for i in range(len(members))],
            score_table={len(members): 0.0},
        )

    def test_screw_example(self):
        model = self._model([["cable", "wood"]])
        specs = build_test_prompts("screw", model)
        assert len(specs) == 1
        assert "a photo of a damaged screw cable wood" in specs[0].abnormal

    def test_test_class_always_first(self):
        model = self._model([["cable", "wood"], ["tile"]])
        for spec in build_test_prompts("screw", model):
            for prompt in spec.normal + spec.abnormal:
                body = prompt.replace("a photo of a", "").split()
                assert "screw" in body
                classes = [w for w in body if w in ("screw", "cable", "wood", "tile")]
                assert classes[0] == "screw"

    def test_cardinality_two_clusters(self):
        model = self._model([["cable"], ["wood"]])
        specs = build_test_prompts("screw", model)
        assert len(specs) == 2
        for spec in specs:
            assert len(spec.normal) == len(csp.DEFAULT_NORMAL_STATES)
            assert len(spec.abnormal) == len(csp.DEFAULT_ABNORMAL_STATES)

    def test_empty_class_rejected(self):
        model = self._model([["cable"]])
        with pytest.raises(ValueError, match="non-empty"):
            build_test_prompts("", model)


class TestRestartOptimality:
    def test_small_sets_near_optimal(self):
        hits = 0
        trials = 25
        for trial in range(trials):
            rng = np.random.default_rng(trial)
            n = int(rng.integers(4, 9))
            k = int(rng.integers(2, min(4, n) + 1))
            pts = rng.standard_normal((n, 2))
            res = kmeans(pts, k, seed=trial)
            opt = brute_force_inertia(pts, k)
            if res.inertia <= 1.05 * opt + 1e-12:
                hits += 1
        assert hits >= int(0.95 * trials)
