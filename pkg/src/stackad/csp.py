"""Stacked prompt construction and cluster-count selection.

Categories are embedded from precise prompts, clustered with k-means, and
the cluster count is picked by penalized intra-cluster variance. Each
cluster then gets one stacked prompt concatenating its member names.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .store import TextFeature, l2_normalize

DEFAULT_TEMPLATE = "a photo of a [state][cls]"
DEFAULT_NORMAL_STATES = ("", "flawless", "perfect")
DEFAULT_ABNORMAL_STATES = ("damaged", "broken", "with defect")

CATEGORY_KEY = "category/{name}"
CLUSTER_KEY = "cluster/{index}"
TEST_KEY = "test/{name}/cluster/{index}"
REFERENCE_KEY = "reference/all"


class ClusteringError(Exception):
    pass


@dataclass(frozen=True)
class PromptTemplateSet:
    """Template with [state]/[cls] slots plus the state descriptor lists."""

    template: str = DEFAULT_TEMPLATE
    normal_states: tuple[str, ...] = DEFAULT_NORMAL_STATES
    abnormal_states: tuple[str, ...] = DEFAULT_ABNORMAL_STATES

    def __post_init__(self) -> None:
        if not self.normal_states or not self.abnormal_states:
            raise ValueError("state lists must be non-empty")
        for slot in ("[state]", "[cls]"):
            if self.template.count(slot) != 1:
                raise ValueError(f"template must contain {slot} exactly once")


DEFAULT_TEMPLATES = PromptTemplateSet()


@dataclass
class PromptPairSpec:
    """Concrete normal/abnormal prompt strings for one prompt key."""

    key: str
    normal: list[str]
    abnormal: list[str]


def build_prompt(state: str, classes: list[str], template: str = DEFAULT_TEMPLATE) -> str:
    """Fill the template; class names are stacked space-separated in order."""
    if not classes:
        raise ValueError("class list must be non-empty")
    text = template.replace("[state]", f" {state} ").replace("[cls]", f" {' '.join(classes)} ")
    return " ".join(text.split())


def prompt_pair_spec(key: str, classes: list[str], templates: PromptTemplateSet = DEFAULT_TEMPLATES) -> PromptPairSpec:
    return PromptPairSpec(
        key=key,
        normal=[build_prompt(s, classes, templates.template) for s in templates.normal_states],
        abnormal=[build_prompt(s, classes, templates.template) for s in templates.abnormal_states],
    )


def category_text_features(categories: list[str], store, templates: PromptTemplateSet = DEFAULT_TEMPLATES) -> np.ndarray:
    """One unit-norm row per category, from its precise normal-state prompts."""
    if len(set(categories)) != len(categories):
        raise ValueError("categories must be distinct")
    rows = []
    for cat in categories:
        spec = prompt_pair_spec(CATEGORY_KEY.format(name=cat), [cat], templates)
        feat: TextFeature = store.get(spec.key, spec)
        rows.append(np.asarray(feat.normal, dtype=np.float64))
    return np.stack(rows, axis=0)


# ---------------------------------------------------------------------------
# k-means with deterministic restarts


@dataclass
class KMeansResult:
    assignment: np.ndarray
    centroids: np.ndarray
    inertia: float


def _kmeans_once(points: np.ndarray, k: int, rng: np.random.Generator) -> KMeansResult:
    n = points.shape[0]
    # k-means++ seeding
    centers = [points[int(rng.integers(n))]]
    for _ in range(1, k):
        d2 = np.min(
            ((points[:, None, :] - np.stack(centers)[None, :, :]) ** 2).sum(axis=2), axis=1
        )
        total = d2.sum()
        if total == 0.0:
            centers.append(points[int(rng.integers(n))])
            continue
        centers.append(points[int(rng.choice(n, p=d2 / total))])
    centroids = np.stack(centers)

    assignment = np.full(n, -1, dtype=int)
    for _ in range(100):
        d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_assignment = np.argmin(d2, axis=1)
        # repair empty clusters: reseed each to the farthest point whose own
        # cluster keeps at least one member
        for c in range(k):
            if np.any(new_assignment == c):
                continue
            sizes = np.bincount(new_assignment, minlength=k)
            dist_own = d2[np.arange(n), new_assignment].copy()
            dist_own[sizes[new_assignment] <= 1] = -np.inf
            far = int(np.argmax(dist_own))
            new_assignment[far] = c
        if np.array_equal(new_assignment, assignment):
            break
        assignment = new_assignment
        for c in range(k):
            centroids[c] = points[assignment == c].mean(axis=0)
    d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    inertia = float(d2[np.arange(n), assignment].sum())
    return KMeansResult(assignment=assignment, centroids=centroids, inertia=inertia)


def kmeans(points: np.ndarray, k: int, seed: int, restarts: int = 8) -> KMeansResult:
    """Lloyd iterations from k-means++ starts; best of `restarts` by inertia.

    Restart r draws from a generator seeded with (seed, r), so results do
    not depend on evaluation order.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ClusteringError("points must be a 2-D matrix")
    if not np.all(np.isfinite(points)):
        raise ClusteringError("non-finite points")
    if k < 1 or k > points.shape[0]:
        raise ClusteringError(f"k={k} out of range for {points.shape[0]} points")
    best: KMeansResult | None = None
    for r in range(restarts):
        rng = np.random.default_rng([seed, r])
        res = _kmeans_once(points, k, rng)
        if best is None or res.inertia < best.inertia:
            best = res
    assert best is not None
    return best


def cluster_score(
    points: np.ndarray,
    assignment: np.ndarray,
    n: int,
    lambda_coeff: float = 0.1,
    penalty_base: float = math.e,
) -> float:
    """Sum of per-cluster mean squared distances plus lambda_coeff * base**n."""
    points = np.asarray(points, dtype=np.float64)
    assignment = np.asarray(assignment, dtype=int)
    total = 0.0
    for c in range(n):
        members = points[assignment == c]
        if members.shape[0] == 0:
            raise ClusteringError(f"cluster {c} is empty")
        centroid = members.mean(axis=0)
        total += float(((members - centroid) ** 2).sum()) / members.shape[0]
    return total + lambda_coeff * penalty_base**n


@dataclass
class ClusterModel:
    """Selected cluster structure plus the stacked prompts it induces."""

    n_star: int
    assignment: dict[str, int]
    centroids: np.ndarray
    member_order: list[list[str]]
    stacked_prompt_keys: list[str]
    score_table: dict[int, float]

    def members(self, cluster: int) -> list[str]:
        return self.member_order[cluster]

    def to_json(self) -> dict:
        return {
            "n_star": self.n_star,
            "assignment": self.assignment,
            "centroids": [[float(x) for x in row] for row in self.centroids],
            "member_order": self.member_order,
            "stacked_prompt_keys": self.stacked_prompt_keys,
            "score_table": {str(k): float(v) for k, v in self.score_table.items()},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ClusterModel":
        return cls(
            n_star=int(obj["n_star"]),
            assignment={k: int(v) for k, v in obj["assignment"].items()},
            centroids=np.asarray(obj["centroids"], dtype=np.float64),
            member_order=[list(m) for m in obj["member_order"]],
            stacked_prompt_keys=list(obj["stacked_prompt_keys"]),
            score_table={int(k): float(v) for k, v in obj["score_table"].items()},
        )

    def save(self, path: str) -> None:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path: str) -> "ClusterModel":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def order_members(categories: list[str], features: np.ndarray, centroid: np.ndarray) -> list[str]:
    """Descending cosine similarity to the centroid; ties lexicographic."""
    normed, _ = l2_normalize(features)
    c_normed, zero = l2_normalize(centroid)
    if bool(np.any(zero)):
        sims = np.zeros(len(categories))
    else:
        sims = normed @ c_normed
    order = sorted(range(len(categories)), key=lambda i: (-sims[i], categories[i]))
    return [categories[i] for i in order]


def select_clusters(
    points: np.ndarray,
    categories: list[str],
    k_max: int,
    seed: int,
    lambda_coeff: float = 0.1,
    penalty_base: float = math.e,
    restarts: int = 8,
) -> ClusterModel:
    """Pick n* = argmin of the penalized score over n in [1, k_max]."""
    points = np.asarray(points, dtype=np.float64)
    if len(categories) != points.shape[0]:
        raise ClusteringError("one feature row per category required")
    if k_max > len(categories):
        raise ClusteringError("k_max exceeds category count")
    score_table: dict[int, float] = {}
    results: dict[int, KMeansResult] = {}
    for n in range(1, k_max + 1):
        res = kmeans(points, n, seed=seed, restarts=restarts)
        results[n] = res
        score_table[n] = cluster_score(points, res.assignment, n, lambda_coeff, penalty_base)
    n_star = min(score_table, key=lambda n: (score_table[n], n))
    best = results[n_star]

    member_order: list[list[str]] = []
    for c in range(n_star):
        idx = [i for i in range(len(categories)) if best.assignment[i] == c]
        member_order.append(
            order_members([categories[i] for i in idx], points[idx], best.centroids[c])
        )
    return ClusterModel(
        n_star=n_star,
        assignment={cat: int(best.assignment[i]) for i, cat in enumerate(categories)},
        centroids=best.centroids,
        member_order=member_order,
        stacked_prompt_keys=[CLUSTER_KEY.format(index=c) for c in range(n_star)],
        score_table=score_table,
    )


def stacked_prompt_specs(model: ClusterModel, templates: PromptTemplateSet = DEFAULT_TEMPLATES) -> list[PromptPairSpec]:
    """One stacked prompt pair per training cluster."""
    return [
        prompt_pair_spec(model.stacked_prompt_keys[c], model.member_order[c], templates)
        for c in range(model.n_star)
    ]


def build_test_prompts(
    test_class: str,
    model: ClusterModel,
    templates: PromptTemplateSet = DEFAULT_TEMPLATES,
) -> list[PromptPairSpec]:
    """Per cluster, prompts that prepend the test class to the stack."""
    if not test_class:
        raise ValueError("test class must be non-empty")
    specs = []
    for c in range(model.n_star):
        classes = [test_class] + model.member_order[c]
        specs.append(prompt_pair_spec(TEST_KEY.format(name=test_class, index=c), classes, templates))
    return specs


def reference_prompt_spec(
    categories: list[str],
    features: np.ndarray,
    templates: PromptTemplateSet = DEFAULT_TEMPLATES,
) -> PromptPairSpec:
    """Single-cluster stacked prompt over every training category."""
    order = order_members(categories, features, np.asarray(features, dtype=np.float64).mean(axis=0))
    return prompt_pair_spec(REFERENCE_KEY, order, templates)
