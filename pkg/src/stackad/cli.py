"""Command-line pipeline: manifest, cluster, emit-prompts, train, infer, eval, mock-gen.

One JSON config drives everything; flags override config keys. Exit codes:
0 success, 1 validation, 2 missing input, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import math
import os
import sys

import numpy as np

from . import csp, efa, metrics, rpl
from .mock import MANIFEST_FILENAME, MOCKSPEC_FILENAME, MockSpec, generate_mock_dataset, store_from_mockspec
from .store import (
    CodecError,
    DatasetManifest,
    Dims,
    ManifestEntry,
    ManifestError,
    load_bundle,
    load_manifest,
    load_mask,
    resolve_path,
    validate_manifest,
)
from .text import FileTextStore, MissingTextError, read_prompt_list, write_prompt_list

FEATURE_ROOT_ENV = "STACKAD_FEATURE_ROOT"

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_MISSING_INPUT = 2
EXIT_NUMERIC = 3


class ConfigError(Exception):
    pass


class MissingInputError(Exception):
    pass


class NumericError(Exception):
    pass


DEFAULT_CONFIG = {
    "provider": "mock",
    "mockspec": None,
    "text_features": None,
    "category_features": None,
    "csp": {
        "k_max": None,
        "lambda_coeff": 0.1,
        "penalty_base": math.e,
        "restarts": 8,
        "template": csp.DEFAULT_TEMPLATE,
        "normal_states": list(csp.DEFAULT_NORMAL_STATES),
        "abnormal_states": list(csp.DEFAULT_ABNORMAL_STATES),
    },
    "train": {},
    "rpl": {},
    "metrics": {"fpr_cap": 0.3, "num_thresholds": 512},
}


class RunConfig:
    def __init__(self, obj: dict, base_dir: str = "."):
        merged = copy.deepcopy(DEFAULT_CONFIG)
        for key, value in obj.items():
            if isinstance(value, dict) and isinstance(merged.get(key), dict):
                merged[key].update(value)
            else:
                merged[key] = value
        self.raw = merged
        if "seed" not in merged:
            raise ConfigError("config field 'seed' is mandatory")
        self.seed = int(merged["seed"])
        paths = merged.get("paths")
        if not isinstance(paths, dict):
            raise ConfigError("config field 'paths' is mandatory")
        for key in ("manifest", "feature_root", "output_root"):
            if key not in paths:
                raise ConfigError(f"config field 'paths.{key}' is mandatory")
        resolve = lambda p: p if os.path.isabs(p) else os.path.join(base_dir, p)
        self.manifest_path = resolve(paths["manifest"])
        self.feature_root = resolve(os.environ.get(FEATURE_ROOT_ENV, paths["feature_root"]))
        self.output_root = resolve(paths["output_root"])
        if merged["provider"] not in ("mock", "files"):
            raise ConfigError(f"unknown provider {merged['provider']!r}")
        self.provider = merged["provider"]
        self.mockspec_path = (
            resolve(merged["mockspec"])
            if merged["mockspec"]
            else os.path.join(self.feature_root, MOCKSPEC_FILENAME)
        )
        self.text_feature_paths = [
            resolve(p) for p in _as_list(merged.get("text_features"))
        ]
        self.category_feature_paths = [
            resolve(p) for p in _as_list(merged.get("category_features"))
        ]
        c = merged["csp"]
        self.templates = csp.PromptTemplateSet(
            template=c["template"],
            normal_states=tuple(c["normal_states"]),
            abnormal_states=tuple(c["abnormal_states"]),
        )
        self.k_max = c["k_max"]
        self.lambda_coeff = float(c["lambda_coeff"])
        self.penalty_base = float(c["penalty_base"])
        self.restarts = int(c["restarts"])
        train = dict(merged["train"])
        train.setdefault("seed", self.seed)
        self.train_config = efa.TrainConfig.from_json(train)
        rcfg = dict(merged["rpl"])
        rcfg.setdefault("seed", self.seed)
        self.rpl_config = rpl.RplConfig.from_json(rcfg)
        self.fpr_cap = float(merged["metrics"]["fpr_cap"])
        self.num_thresholds = int(merged["metrics"]["num_thresholds"])

    def validate_inputs(self) -> None:
        if not os.path.exists(self.manifest_path):
            raise MissingInputError(f"manifest not found: {self.manifest_path}")
        if not os.path.isdir(self.feature_root):
            raise MissingInputError(f"feature root not found: {self.feature_root}")

    def out(self, *parts: str) -> str:
        return os.path.join(self.output_root, *parts)


def _as_list(value) -> list:
    if value is None:
        return []
    if isinstance(value, str):
        return [value]
    return list(value)


def load_config(path: str, overrides: list[str], seed=None, provider=None) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except FileNotFoundError as exc:
        raise MissingInputError(f"config not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key.path=value, got {item!r}")
        key, _, raw = item.partition("=")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = obj
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override through non-object key {part!r}")
        node[parts[-1]] = value
    if seed is not None:
        obj["seed"] = seed
    if provider is not None:
        obj["provider"] = provider
    return RunConfig(obj, base_dir=os.path.dirname(os.path.abspath(path)))


def _text_store(cfg: RunConfig, stage: str):
    """stage: 'categories' needs stage-1 embeddings, 'prompts' stage-2."""
    if cfg.provider == "mock":
        if not os.path.exists(cfg.mockspec_path):
            raise MissingInputError(f"mockspec not found: {cfg.mockspec_path}")
        return store_from_mockspec(cfg.mockspec_path, cfg.templates)
    paths = cfg.category_feature_paths if stage == "categories" else cfg.text_feature_paths
    if not paths:
        paths = cfg.text_feature_paths or cfg.category_feature_paths
    if not paths:
        raise MissingInputError(f"no text feature files configured for stage {stage!r}")
    for p in paths:
        if not os.path.exists(p):
            raise MissingInputError(f"text feature file not found: {p}")
    return FileTextStore(paths)


def _load_validated_manifest(cfg: RunConfig) -> DatasetManifest:
    manifest = load_manifest(cfg.manifest_path)
    validate_manifest(manifest, cfg.feature_root, check_files=True)
    return manifest


# ---------------------------------------------------------------------------
# Subcommands


def cmd_mock_gen(args) -> int:
    with open(args.spec, "r", encoding="utf-8") as fh:
        spec = MockSpec.from_json(json.load(fh))
    manifest = generate_mock_dataset(spec, args.out)
    print(f"mock dataset: {len(manifest.entries)} images -> {args.out}")
    return EXIT_OK


def _walk_mvtec(root: str, dims: Dims) -> DatasetManifest:
    categories = sorted(
        d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d))
    )
    if not categories:
        raise ConfigError(f"no categories under {root}")
    entries = []
    for cat in categories:
        for split in ("train", "test"):
            split_dir = os.path.join(root, cat, split)
            if not os.path.isdir(split_dir):
                continue
            for sub in sorted(os.listdir(split_dir)):
                sub_dir = os.path.join(split_dir, sub)
                if not os.path.isdir(sub_dir):
                    continue
                label = "normal" if sub == "good" else "anomalous"
                for name in sorted(os.listdir(sub_dir)):
                    stem, ext = os.path.splitext(name)
                    if ext.lower() not in (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"):
                        continue
                    image_id = f"{cat}/{split}/{sub}/{stem}"
                    mask_path = None
                    if label == "anomalous":
                        mask_rel = os.path.join(cat, "ground_truth", sub, f"{stem}_mask.png")
                        if not os.path.exists(os.path.join(root, mask_rel)):
                            raise ConfigError(
                                f"missing mask for anomalous image {image_id!r}"
                            )
                        mask_path = mask_rel
                    entries.append(
                        ManifestEntry(
                            image_id=image_id,
                            category=cat,
                            split=split,
                            feature_path=os.path.join("features", f"{image_id}.sclp"),
                            label=label,
                            mask_path=mask_path,
                        )
                    )
    return DatasetManifest(dims=dims, entries=entries)


def _walk_flat(root: str, dims: Dims) -> DatasetManifest:
    images_dir = os.path.join(root, "images")
    if not os.path.isdir(images_dir):
        raise ConfigError(f"no categories under {root} (expected images/ directory)")
    entries = []
    names = sorted(os.listdir(images_dir))
    if not names:
        raise ConfigError(f"no categories under {root}")
    for name in names:
        stem, ext = os.path.splitext(name)
        if ext.lower() not in (".png", ".jpg", ".jpeg", ".bmp"):
            continue
        parts = stem.split("__")
        if len(parts) != 4:
            raise ConfigError(
                f"flat layout expects category__split__label__id names, got {name!r}"
            )
        cat, split, label, _ = parts
        mask_rel = os.path.join("masks", f"{stem}.png")
        has_mask = os.path.exists(os.path.join(root, mask_rel))
        if label == "anomalous" and split == "train" and not has_mask:
            raise ConfigError(f"missing mask for anomalous image {stem!r}")
        entries.append(
            ManifestEntry(
                image_id=stem,
                category=cat,
                split=split,
                feature_path=os.path.join("features", f"{stem}.sclp"),
                label=label,
                mask_path=mask_rel if (label == "anomalous" and has_mask) else None,
            )
        )
    if not entries:
        raise ConfigError(f"no categories under {root}")
    return DatasetManifest(dims=dims, entries=entries)


def cmd_manifest(args) -> int:
    if not os.path.isdir(args.root):
        raise MissingInputError(f"dataset root not found: {args.root}")
    dims = Dims(D_img=args.d_img, D_txt=args.d_txt, G=args.grid, H=args.height, W=args.width)
    if args.layout == "mvtec":
        manifest = _walk_mvtec(args.root, dims)
    elif args.layout == "flat":
        manifest = _walk_flat(args.root, dims)
    else:
        raise ConfigError(f"unknown layout {args.layout!r}")
    validate_manifest(manifest, args.root, check_files=False)
    from .store import save_manifest

    save_manifest(manifest, args.out)
    print(f"manifest: {len(manifest.entries)} entries -> {args.out}")
    return EXIT_OK


def _category_prompt_specs(categories: list[str], cfg: RunConfig) -> list[csp.PromptPairSpec]:
    return [
        csp.prompt_pair_spec(csp.CATEGORY_KEY.format(name=c), [c], cfg.templates)
        for c in categories
    ]


def _pipeline_prompt_specs(
    model: csp.ClusterModel,
    train_cats: list[str],
    test_cats: list[str],
    feats: np.ndarray,
    cfg: RunConfig,
) -> list[csp.PromptPairSpec]:
    specs = csp.stacked_prompt_specs(model, cfg.templates)
    for cat in test_cats:
        specs.extend(csp.build_test_prompts(cat, model, cfg.templates))
    specs.append(csp.reference_prompt_spec(train_cats, feats, cfg.templates))
    return specs


def cmd_cluster(cfg: RunConfig) -> int:
    cfg.validate_inputs()
    manifest = _load_validated_manifest(cfg)
    train_cats = manifest.categories("train")
    test_cats = manifest.categories("test")
    if not train_cats:
        raise ConfigError("manifest has no training categories")
    store = _text_store(cfg, "categories")
    feats = csp.category_text_features(train_cats, store, cfg.templates)
    k_max = cfg.k_max if cfg.k_max else min(8, len(train_cats))
    k_max = min(k_max, len(train_cats))
    model = csp.select_clusters(
        feats,
        train_cats,
        k_max,
        cfg.seed,
        lambda_coeff=cfg.lambda_coeff,
        penalty_base=cfg.penalty_base,
        restarts=cfg.restarts,
    )
    model.save(cfg.out("cluster_model.json"))
    write_prompt_list(cfg.out("prompts", "categories.tsv"), _category_prompt_specs(train_cats, cfg))
    write_prompt_list(
        cfg.out("prompts", "prompts.tsv"),
        _pipeline_prompt_specs(model, train_cats, test_cats, feats, cfg),
    )
    print(f"clusters: n*={model.n_star} of k_max={k_max}")
    for c in range(model.n_star):
        print(f"  cluster {c}: {' '.join(model.member_order[c])}")
    return EXIT_OK


def cmd_emit_prompts(cfg: RunConfig, stage: str) -> int:
    cfg.validate_inputs()
    manifest = _load_validated_manifest(cfg)
    train_cats = manifest.categories("train")
    test_cats = manifest.categories("test")
    if stage == "categories":
        path = cfg.out("prompts", "categories.tsv")
        write_prompt_list(path, _category_prompt_specs(train_cats, cfg))
    elif stage == "clusters":
        model_path = cfg.out("cluster_model.json")
        if not os.path.exists(model_path):
            raise MissingInputError(f"cluster model not found: {model_path}")
        model = csp.ClusterModel.load(model_path)
        store = _text_store(cfg, "categories")
        feats = csp.category_text_features(train_cats, store, cfg.templates)
        path = cfg.out("prompts", "prompts.tsv")
        write_prompt_list(path, _pipeline_prompt_specs(model, train_cats, test_cats, feats, cfg))
    else:
        raise ConfigError(f"unknown stage {stage!r}")
    print(f"prompts -> {path}")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    cfg.validate_inputs()
    manifest = _load_validated_manifest(cfg)
    model_path = cfg.out("cluster_model.json")
    if not os.path.exists(model_path):
        raise MissingInputError(f"cluster model not found: {model_path}")
    model = csp.ClusterModel.load(model_path)
    store = _text_store(cfg, "prompts")

    bank, log = efa.train(
        manifest, model, store, cfg.train_config, cfg.feature_root, cfg.templates
    )
    bank.save(cfg.out("headbank.sclp"))
    with open(cfg.out("loss_efa.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,step,cluster,layer,loss\n")
        for rec in log:
            fh.write(f"{rec.epoch},{rec.step},{rec.cluster},{rec.layer},{rec.loss!r}\n")

    train_cats = manifest.categories("train")
    feats = None
    ref_spec = None
    if cfg.provider == "mock":
        feats = csp.category_text_features(train_cats, store, cfg.templates)
        ref_spec = csp.reference_prompt_spec(train_cats, feats, cfg.templates)
    reference = store.get(csp.REFERENCE_KEY, ref_spec)

    cls_features = []
    labels = []
    for e in manifest.split_entries("train"):
        bundle = load_bundle(e, cfg.feature_root)
        cls_features.append(bundle.cls.astype(np.float64))
        labels.append(1 if e.label == "anomalous" else 0)
    pair, curve, single_class = rpl.train_rpl(cls_features, labels, reference, cfg.rpl_config)
    pair.save(cfg.out("rpl.sclp"))
    with open(cfg.out("loss_rpl.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,step,loss\n")
        for epoch, step, loss in curve:
            fh.write(f"{epoch},{step},{loss!r}\n")
    if single_class:
        print("warning: single-class training set; CE gradient is one-sided", file=sys.stderr)
    print(f"trained {len(bank.heads)} heads + prompt pair -> {cfg.output_root}")
    return EXIT_OK


def cmd_infer(cfg: RunConfig) -> int:
    cfg.validate_inputs()
    manifest = _load_validated_manifest(cfg)
    model_path = cfg.out("cluster_model.json")
    bank_path = cfg.out("headbank.sclp")
    rpl_path = cfg.out("rpl.sclp")
    for path in (model_path, bank_path, rpl_path):
        if not os.path.exists(path):
            raise MissingInputError(f"trained artifact not found: {path}")
    model = csp.ClusterModel.load(model_path)
    bank = efa.HeadBank.load(bank_path)
    if bank.clusters() != list(range(model.n_star)):
        raise ConfigError(
            f"head bank clusters {bank.clusters()} do not match cluster model n*={model.n_star}"
        )
    pair = rpl.LearnablePromptPair.load(rpl_path)
    store = _text_store(cfg, "prompts")

    d = manifest.dims
    texts_by_cat: dict[str, dict[int, object]] = {}
    for cat in manifest.categories("test"):
        specs = csp.build_test_prompts(cat, model, cfg.templates)
        texts_by_cat[cat] = {i: store.get(spec.key, spec) for i, spec in enumerate(specs)}

    rows = []
    for e in manifest.split_entries("test"):
        bundle = load_bundle(e, cfg.feature_root)
        result = efa.infer(bundle, bank, texts_by_cat[e.category], cfg.train_config, (d.H, d.W))
        if not np.all(np.isfinite(result.map_final.grid)):
            raise NumericError(f"non-finite anomaly map for {e.image_id}")
        efa.save_anomaly_map(cfg.out("maps", f"{e.image_id}.sclp"), e.image_id, result.map_final)
        efa.save_heatmap_png(cfg.out("heatmaps", f"{e.image_id}.png"), result.map_final)
        score = rpl.image_score(bundle.cls, pair, cfg.rpl_config.logit_scale)
        if not np.isfinite(score):
            raise NumericError(f"non-finite image score for {e.image_id}")
        rows.append((e.image_id, score, e.label))
    with open(cfg.out("scores.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("image_id,score,label\n")
        for image_id, score, label in rows:
            fh.write(f"{image_id},{score!r},{label}\n")
    print(f"inferred {len(rows)} test images -> {cfg.output_root}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    cfg.validate_inputs()
    manifest = _load_validated_manifest(cfg)
    d = manifest.dims
    maps = []
    gts = []
    image_scores = []
    image_labels = []
    scores_path = cfg.out("scores.csv")
    if not os.path.exists(scores_path):
        raise MissingInputError(f"scores not found: {scores_path}")
    score_by_id = {}
    with open(scores_path, "r", encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            image_id, score, label = line.rstrip("\n").split(",")
            score_by_id[image_id] = (float(score), label)
    for e in manifest.split_entries("test"):
        map_path = cfg.out("maps", f"{e.image_id}.sclp")
        if not os.path.exists(map_path):
            raise MissingInputError(f"anomaly map not found: {map_path}")
        _, amap = efa.load_anomaly_map(map_path)
        maps.append(amap.grid)
        if e.mask_path is not None:
            gts.append(load_mask(resolve_path(e.mask_path, cfg.feature_root)))
        else:
            gts.append(np.zeros((d.H, d.W), dtype=np.float64))
        if e.image_id not in score_by_id:
            raise MissingInputError(f"no score row for {e.image_id}")
        score, _ = score_by_id[e.image_id]
        image_scores.append(score)
        image_labels.append(1 if e.label == "anomalous" else 0)
    image_set = metrics.ScoredSet(scores=np.asarray(image_scores), labels=np.asarray(image_labels))
    report = metrics.evaluate_run(maps, gts, image_set, cfg.fpr_cap, cfg.num_thresholds)
    with open(cfg.out("report.json"), "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    table = metrics.format_report(report)
    with open(cfg.out("report.txt"), "w", encoding="utf-8") as fh:
        fh.write(table + "\n")
    fpr, pro = metrics.pro_curve(maps, gts, cfg.num_thresholds)
    with open(cfg.out("pro_curve.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("fpr,pro\n")
        for x, y in zip(fpr, pro):
            fh.write(f"{x!r},{y!r}\n")
    print(table)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stackad")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_args(p):
        p.add_argument("--config", required=True, help="run config JSON")
        p.add_argument("--set", action="append", default=[], dest="overrides",
                       help="override a config key: key.path=value (JSON or string)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--provider", choices=["mock", "files"], default=None)

    p = sub.add_parser("mock-gen", help="generate a deterministic mock dataset")
    p.add_argument("--spec", required=True, help="MockSpec JSON file")
    p.add_argument("--out", required=True, help="output dataset directory")

    p = sub.add_parser("manifest", help="walk a raw dataset tree into a manifest")
    p.add_argument("--root", required=True)
    p.add_argument("--layout", required=True, choices=["mvtec", "flat"])
    p.add_argument("--out", required=True)
    p.add_argument("--d-img", type=int, default=1024)
    p.add_argument("--d-txt", type=int, default=768)
    p.add_argument("--grid", type=int, default=37)
    p.add_argument("--height", type=int, default=518)
    p.add_argument("--width", type=int, default=518)

    for name in ("cluster", "train", "infer", "eval"):
        add_config_args(sub.add_parser(name))

    p = sub.add_parser("emit-prompts", help="emit prompt lists for the embedding tool")
    add_config_args(p)
    p.add_argument("--stage", choices=["categories", "clusters"], default="categories")

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "mock-gen":
            return cmd_mock_gen(args)
        if args.command == "manifest":
            return cmd_manifest(args)
        cfg = load_config(args.config, args.overrides, args.seed, args.provider)
        if args.command == "cluster":
            return cmd_cluster(cfg)
        if args.command == "emit-prompts":
            return cmd_emit_prompts(cfg, args.stage)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "infer":
            return cmd_infer(cfg)
        if args.command == "eval":
            return cmd_eval(cfg)
        raise ConfigError(f"unknown command {args.command!r}")
    except (MissingInputError, MissingTextError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CodecError as exc:
        code = EXIT_NUMERIC if "NaN" in str(exc) or "non-finite" in str(exc) else EXIT_VALIDATION
        print(f"error: {exc}", file=sys.stderr)
        return code
    except (ConfigError, ManifestError, ValueError, csp.ClusteringError, efa.EfaError, rpl.RplError, metrics.MetricError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    raise SystemExit(main())
