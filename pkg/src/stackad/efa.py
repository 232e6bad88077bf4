"""Ensemble feature alignment: per-cluster per-layer linear heads.

Heads project patch tokens into text space; anomaly evidence per cell is a
two-channel scaled softmax over (normal, abnormal) cosine similarities.
Training backpropagates focal + dice losses through projection,
normalization, cosine and softmax with exact analytic gradients (checked
against central finite differences in the test suite). Inference fuses all
heads' maps with CLS-attention weights.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import csp
from .store import (
    KIND_HEADBANK,
    LAYER_INDICES,
    DatasetManifest,
    FeatureBundle,
    TextFeature,
    l2_normalize,
    load_bundle,
    sclp_read,
    sclp_write,
)

PROB_CLAMP = 1e-7


class EfaError(Exception):
    pass


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class TrainConfig:
    alpha: float = 1.0
    gamma: float = 2.0
    epsilon: float = 1.0
    logit_scale: float = 100.0
    lr: float = 1e-3
    epochs: int = 2
    batch_size: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    smooth_sigma: float = 0.0

    def __post_init__(self) -> None:
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.logit_scale <= 0:
            raise ValueError("logit_scale must be > 0")

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        known = {k: v for k, v in obj.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class ProjectionHead:
    cluster: int
    layer: int
    W: np.ndarray  # (D_txt, D_img)
    b: np.ndarray  # (D_txt,)

    def validate(self) -> None:
        if self.W.ndim != 2 or self.b.ndim != 1 or self.W.shape[0] != self.b.shape[0]:
            raise EfaError(f"head ({self.cluster},{self.layer}) has inconsistent shapes")
        if not (np.all(np.isfinite(self.W)) and np.all(np.isfinite(self.b))):
            raise EfaError(f"head ({self.cluster},{self.layer}) has non-finite parameters")


@dataclass
class HeadBank:
    heads: dict[tuple[int, int], ProjectionHead]
    cluster_model_ref: str = ""
    train_config_ref: str = ""

    def clusters(self) -> list[int]:
        return sorted({c for c, _ in self.heads})

    def layers(self) -> list[int]:
        return sorted({l for _, l in self.heads})

    def save(self, path: str) -> None:
        keys = sorted(self.heads)
        meta = {
            "cluster_model_ref": self.cluster_model_ref,
            "train_config_ref": self.train_config_ref,
            "heads": [{"cluster": c, "layer": l} for c, l in keys],
        }
        tensors = []
        for c, l in keys:
            head = self.heads[(c, l)]
            head.validate()
            tensors.append((f"head/{c}/{l}/W", head.W))
            tensors.append((f"head/{c}/{l}/b", head.b))
        sclp_write(path, KIND_HEADBANK, meta, tensors)

    @classmethod
    def load(cls, path: str) -> "HeadBank":
        kind, meta, tensors = sclp_read(path)
        if kind != KIND_HEADBANK:
            raise EfaError(f"{path} is not a head bank (kind={kind!r})")
        heads = {}
        for item in meta["heads"]:
            c, l = int(item["cluster"]), int(item["layer"])
            heads[(c, l)] = ProjectionHead(
                cluster=c,
                layer=l,
                W=tensors[f"head/{c}/{l}/W"].astype(np.float64),
                b=tensors[f"head/{c}/{l}/b"].astype(np.float64),
            )
        return cls(
            heads=heads,
            cluster_model_ref=meta.get("cluster_model_ref", ""),
            train_config_ref=meta.get("train_config_ref", ""),
        )


@dataclass
class AnomalyMap:
    grid: np.ndarray
    resolution_tag: str = "patch"
    degenerate_cells: int = 0

    def validate(self) -> None:
        if not np.all(np.isfinite(self.grid)):
            raise EfaError("anomaly map contains non-finite values")
        if self.grid.min() < 0.0 or self.grid.max() > 1.0:
            raise EfaError("anomaly map values must lie in [0, 1]")


def _as_grid(map_like) -> np.ndarray:
    grid = map_like.grid if isinstance(map_like, AnomalyMap) else map_like
    return np.asarray(grid, dtype=np.float64)


def project(head: ProjectionHead, patches: np.ndarray) -> np.ndarray:
    """Affine map of every patch vector: W h + b (no normalization here)."""
    patches = np.asarray(patches, dtype=np.float64)
    if patches.shape[-1] != head.W.shape[1]:
        raise EfaError(
            f"patch dim {patches.shape[-1]} does not match head input dim {head.W.shape[1]}"
        )
    return patches @ head.W.T + head.b


def anomaly_map(projected: np.ndarray, text: TextFeature, logit_scale: float) -> AnomalyMap:
    """Scaled two-channel softmax over (normal, abnormal) cosines per cell."""
    proj = np.asarray(projected, dtype=np.float64)
    lead = proj.shape[:-1]
    flat = proj.reshape(-1, proj.shape[-1])
    normed, zero = l2_normalize(flat)
    diff = np.asarray(text.abnormal, dtype=np.float64) - np.asarray(text.normal, dtype=np.float64)
    u = normed @ diff
    grid = _sigmoid(logit_scale * u)
    grid[zero] = 0.5
    return AnomalyMap(
        grid=grid.reshape(lead), resolution_tag="patch", degenerate_cells=int(zero.sum())
    )


def upsample(map_like, h: int, w: int) -> AnomalyMap:
    """Bilinear, align-corners resize; output range stays inside input range."""
    grid = _as_grid(map_like)
    gh, gw = grid.shape
    ys = np.linspace(0.0, gh - 1.0, h) if h > 1 else np.zeros(h)
    xs = np.linspace(0.0, gw - 1.0, w) if w > 1 else np.zeros(w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, gh - 1)
    x1 = np.minimum(x0 + 1, gw - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    out = (
        grid[np.ix_(y0, x0)] * (1 - fy) * (1 - fx)
        + grid[np.ix_(y0, x1)] * (1 - fy) * fx
        + grid[np.ix_(y1, x0)] * fy * (1 - fx)
        + grid[np.ix_(y1, x1)] * fy * fx
    )
    tag = "image" if (h, w) != (gh, gw) else (
        map_like.resolution_tag if isinstance(map_like, AnomalyMap) else "patch"
    )
    deg = map_like.degenerate_cells if isinstance(map_like, AnomalyMap) else 0
    return AnomalyMap(grid=out, resolution_tag=tag, degenerate_cells=deg)


def gaussian_smooth(grid: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with reflect padding."""
    if sigma <= 0:
        return np.asarray(grid, dtype=np.float64)
    radius = max(1, int(np.ceil(3.0 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (x / sigma) ** 2)
    kernel /= kernel.sum()
    out = np.asarray(grid, dtype=np.float64)
    for axis in (0, 1):
        padded = np.pad(out, [(radius, radius) if a == axis else (0, 0) for a in (0, 1)], mode="reflect")
        out = np.apply_along_axis(lambda m: np.convolve(m, kernel, mode="valid"), axis, padded)
    return out


def focal_loss(map_like, gt: np.ndarray, alpha: float = 1.0, gamma: float = 2.0) -> float:
    """Pixel mean of the two-term focal loss; map clamped before the logs."""
    m = _as_grid(map_like)
    y = np.asarray(gt, dtype=np.float64)
    if m.shape != y.shape:
        raise EfaError(f"map shape {m.shape} != gt shape {y.shape}")
    mc = np.clip(m, PROB_CLAMP, 1.0 - PROB_CLAMP)
    pos = -alpha * (1.0 - mc) ** gamma * np.log(mc) * y
    neg = -(1.0 - alpha) * mc**gamma * np.log(1.0 - mc) * (1.0 - y)
    return float((pos + neg).mean())


def dice_loss(map_like, gt: np.ndarray, epsilon: float = 1.0) -> float:
    m = _as_grid(map_like)
    y = np.asarray(gt, dtype=np.float64)
    if m.shape != y.shape:
        raise EfaError(f"map shape {m.shape} != gt shape {y.shape}")
    num = 2.0 * float((m * y).sum()) + epsilon
    den = float(m.sum()) + float(y.sum()) + epsilon
    return 1.0 - num / den


@dataclass
class SegLossResult:
    loss: float
    dW: np.ndarray
    db: np.ndarray
    degenerate_cells: int = 0


def seg_loss_and_grad(
    head: ProjectionHead,
    batch: list[tuple[np.ndarray, np.ndarray]],
    text: TextFeature,
    cfg: TrainConfig,
) -> SegLossResult:
    """Mean focal+dice over the batch with exact analytic dW, db.

    The chain is projection -> L2 normalization -> cosine against the
    normal/abnormal pair -> scaled softmax -> focal + dice. Cells whose
    projection is exactly zero contribute probability 0.5 and no gradient;
    probabilities clamped by the focal log guard contribute no focal
    gradient (the clamp is flat there).
    """
    if not batch:
        raise EfaError("empty batch")
    d_txt, d_img = head.W.shape
    t_n = np.asarray(text.normal, dtype=np.float64)
    t_a = np.asarray(text.abnormal, dtype=np.float64)
    diff = t_a - t_n
    tau = cfg.logit_scale
    total_loss = 0.0
    dW = np.zeros_like(head.W, dtype=np.float64)
    db = np.zeros_like(head.b, dtype=np.float64)
    degenerate = 0

    for patches, gt in batch:
        x = np.asarray(patches, dtype=np.float64).reshape(-1, d_img)
        y = np.asarray(gt, dtype=np.float64).reshape(-1)
        if x.shape[0] != y.shape[0]:
            raise EfaError("patch grid and ground truth differ in cell count")
        p_count = x.shape[0]

        z = x @ head.W.T + head.b
        r = np.linalg.norm(z, axis=1)
        zero = r == 0.0
        degenerate += int(zero.sum())
        r_safe = np.where(zero, 1.0, r)
        zh = z / r_safe[:, None]
        u = zh @ diff
        m = _sigmoid(tau * u)
        m = np.where(zero, 0.5, m)

        mc = np.clip(m, PROB_CLAMP, 1.0 - PROB_CLAMP)
        in_range = (m > PROB_CLAMP) & (m < 1.0 - PROB_CLAMP)

        focal = float(
            (
                -cfg.alpha * (1.0 - mc) ** cfg.gamma * np.log(mc) * y
                - (1.0 - cfg.alpha) * mc**cfg.gamma * np.log(1.0 - mc) * (1.0 - y)
            ).mean()
        )
        a_sum = 2.0 * float((m * y).sum()) + cfg.epsilon
        b_sum = float(m.sum()) + float(y.sum()) + cfg.epsilon
        dice = 1.0 - a_sum / b_sum
        total_loss += focal + dice

        if cfg.gamma == 0.0:
            d_pos = -cfg.alpha * y / mc
            d_neg = (1.0 - cfg.alpha) * (1.0 - y) / (1.0 - mc)
        else:
            d_pos = cfg.alpha * y * (
                cfg.gamma * (1.0 - mc) ** (cfg.gamma - 1.0) * np.log(mc)
                - (1.0 - mc) ** cfg.gamma / mc
            )
            d_neg = -(1.0 - cfg.alpha) * (1.0 - y) * (
                cfg.gamma * mc ** (cfg.gamma - 1.0) * np.log(1.0 - mc)
                - mc**cfg.gamma / (1.0 - mc)
            )
        g_m = (d_pos + d_neg) * in_range / p_count
        g_m = g_m + (a_sum - 2.0 * y * b_sum) / (b_sum * b_sum)

        g_u = g_m * tau * m * (1.0 - m)
        g_z = g_u[:, None] * (diff[None, :] - u[:, None] * zh) / r_safe[:, None]
        g_z[zero] = 0.0
        dW += g_z.T @ x
        db += g_z.sum(axis=0)

    n = len(batch)
    return SegLossResult(
        loss=total_loss / n, dW=dW / n, db=db / n, degenerate_cells=degenerate
    )


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p, dtype=np.float64) for k, p in params.items()},
            v={k: np.zeros_like(p, dtype=np.float64) for k, p in params.items()},
            step=0,
        )


def adam_step(
    state: AdamState,
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    lr: float,
    cfg: TrainConfig,
) -> dict[str, np.ndarray]:
    """One in-place Adam update with bias correction; returns params."""
    state.step += 1
    t = state.step
    for key, p in params.items():
        g = np.asarray(grads[key], dtype=np.float64)
        state.m[key] = cfg.beta1 * state.m[key] + (1.0 - cfg.beta1) * g
        state.v[key] = cfg.beta2 * state.v[key] + (1.0 - cfg.beta2) * g * g
        m_hat = state.m[key] / (1.0 - cfg.beta1**t)
        v_hat = state.v[key] / (1.0 - cfg.beta2**t)
        p -= lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    return params


# ---------------------------------------------------------------------------
# Ground truth pooling


def downsample_mask_max(mask: np.ndarray, g: int) -> np.ndarray:
    """Max-pool an H x W binary mask to g x g: a patch is anomalous if any
    covered pixel is."""
    mask = np.asarray(mask, dtype=np.float64)
    h, w = mask.shape
    if h < g or w < g:
        raise EfaError(f"mask {mask.shape} smaller than patch grid {g}")
    row_edges = (np.arange(g + 1) * h) // g
    col_edges = (np.arange(g + 1) * w) // g
    out = np.zeros((g, g), dtype=np.float64)
    for i in range(g):
        for j in range(g):
            block = mask[row_edges[i] : row_edges[i + 1], col_edges[j] : col_edges[j + 1]]
            out[i, j] = 1.0 if block.max() > 0 else 0.0
    return out


# ---------------------------------------------------------------------------
# Training


@dataclass
class LossRecord:
    epoch: int
    step: int
    cluster: int
    layer: int
    loss: float


def init_head(cluster: int, layer: int, d_img: int, d_txt: int, seed: int) -> ProjectionHead:
    """W ~ uniform(+-1/sqrt(D_img)), b = 0, seeded per (cluster, layer)."""
    digest = hashlib.sha256(f"head-init\x1f{seed}\x1f{cluster}\x1f{layer}".encode()).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    bound = 1.0 / np.sqrt(d_img)
    return ProjectionHead(
        cluster=cluster,
        layer=layer,
        W=rng.uniform(-bound, bound, size=(d_txt, d_img)),
        b=np.zeros(d_txt, dtype=np.float64),
    )


def _shuffle_rng(seed: int, cluster: int, epoch: int) -> np.random.Generator:
    digest = hashlib.sha256(f"shuffle\x1f{seed}\x1f{cluster}\x1f{epoch}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def train(
    manifest: DatasetManifest,
    cluster_model: csp.ClusterModel,
    text_store,
    cfg: TrainConfig,
    feature_root: str,
    templates: csp.PromptTemplateSet = csp.DEFAULT_TEMPLATES,
) -> tuple[HeadBank, list[LossRecord]]:
    """Train every (cluster, layer) head on its own cluster's images."""
    d = manifest.dims
    train_entries = manifest.split_entries("train")
    for cat in sorted({e.category for e in train_entries}):
        if cat not in cluster_model.assignment:
            raise EfaError(f"training category {cat!r} missing from the cluster model")

    specs = csp.stacked_prompt_specs(cluster_model, templates)
    texts = {c: text_store.get(spec.key, spec) for c, spec in enumerate(specs)}

    heads: dict[tuple[int, int], ProjectionHead] = {}
    states: dict[tuple[int, int], AdamState] = {}
    for c in range(cluster_model.n_star):
        for l in LAYER_INDICES:
            head = init_head(c, l, d.D_img, d.D_txt, cfg.seed)
            heads[(c, l)] = head
            states[(c, l)] = AdamState.for_params({"W": head.W, "b": head.b})

    log: list[LossRecord] = []
    for c in range(cluster_model.n_star):
        members = set(cluster_model.member_order[c])
        entries = [e for e in train_entries if e.category in members]
        if not entries:
            raise EfaError(f"no training images for cluster {c}")
        text = texts[c]
        for epoch in range(cfg.epochs):
            order = _shuffle_rng(cfg.seed, c, epoch).permutation(len(entries))
            for step, start in enumerate(range(0, len(entries), cfg.batch_size)):
                chunk = [entries[i] for i in order[start : start + cfg.batch_size]]
                per_layer: dict[int, list[tuple[np.ndarray, np.ndarray]]] = {
                    l: [] for l in LAYER_INDICES
                }
                for e in chunk:
                    bundle = load_bundle(e, feature_root)
                    if bundle.mask is not None:
                        gt = downsample_mask_max(bundle.mask, d.G)
                    else:
                        gt = np.zeros((d.G, d.G), dtype=np.float64)
                    for l in LAYER_INDICES:
                        per_layer[l].append((bundle.layers[l], gt))
                for l in LAYER_INDICES:
                    head = heads[(c, l)]
                    res = seg_loss_and_grad(head, per_layer[l], text, cfg)
                    adam_step(
                        states[(c, l)],
                        {"W": head.W, "b": head.b},
                        {"W": res.dW, "b": res.db},
                        cfg.lr,
                        cfg,
                    )
                    log.append(LossRecord(epoch, step, c, l, res.loss))

    model_ref = hashlib.sha256(
        json.dumps(cluster_model.to_json(), sort_keys=True).encode()
    ).hexdigest()
    cfg_ref = hashlib.sha256(json.dumps(cfg.to_json(), sort_keys=True).encode()).hexdigest()
    bank = HeadBank(heads=heads, cluster_model_ref=model_ref, train_config_ref=cfg_ref)
    return bank, log


# ---------------------------------------------------------------------------
# Inference


def softmax_weights(sims: np.ndarray) -> np.ndarray:
    """Plain softmax (no temperature); shift-invariant by construction."""
    sims = np.asarray(sims, dtype=np.float64)
    shifted = np.exp(sims - sims.max())
    return shifted / shifted.sum()


def attention_weights(cls: np.ndarray, cluster_texts: list[TextFeature]) -> tuple[np.ndarray, bool]:
    """Softmax over cosine(CLS, per-cluster mean text embedding).

    Returns (weights, degenerate) where degenerate flags a zero CLS vector
    (weights fall back to uniform).
    """
    if not cluster_texts:
        raise EfaError("at least one cluster required")
    cls = np.asarray(cls, dtype=np.float64)
    if not np.all(np.isfinite(cls)):
        raise EfaError("non-finite CLS vector")
    c_hat, zero = l2_normalize(cls)
    n = len(cluster_texts)
    if bool(zero):
        return np.full(n, 1.0 / n), True
    sims = np.empty(n)
    for i, tf in enumerate(cluster_texts):
        mean = (np.asarray(tf.normal, np.float64) + np.asarray(tf.abnormal, np.float64)) / 2.0
        t_hat, t_zero = l2_normalize(mean)
        sims[i] = 0.0 if bool(t_zero) else float(c_hat @ t_hat)
    return softmax_weights(sims), False


@dataclass
class InferResult:
    map_final: AnomalyMap
    per_layer: dict[tuple[int, int], AnomalyMap]
    weights: np.ndarray
    degenerate: bool = False


def infer(
    bundle: FeatureBundle,
    bank: HeadBank,
    test_texts: dict[int, TextFeature],
    cfg: TrainConfig,
    out_hw: tuple[int, int] | None = None,
) -> InferResult:
    """Weighted fusion of every head's map, averaged over layers.

    map_final = (1/|L|) * sum_l sum_i alpha_i M_i^l, then upsampled to
    out_hw; stays in (0, 1) because the weights are a convex combination.
    """
    clusters = bank.clusters()
    layers = bank.layers()
    if sorted(test_texts) != clusters:
        raise EfaError(
            f"cluster mismatch: bank has {clusters}, test texts have {sorted(test_texts)}"
        )
    weights, degenerate = attention_weights(bundle.cls, [test_texts[c] for c in clusters])

    per_layer: dict[tuple[int, int], AnomalyMap] = {}
    combined = None
    for l in layers:
        for ci, c in enumerate(clusters):
            head = bank.heads[(c, l)]
            amap = anomaly_map(project(head, bundle.layers[l]), test_texts[c], cfg.logit_scale)
            per_layer[(c, l)] = amap
            term = weights[ci] * amap.grid
            combined = term if combined is None else combined + term
    assert combined is not None
    combined = combined / len(layers)

    if out_hw is not None and out_hw != combined.shape:
        final = upsample(AnomalyMap(grid=combined), out_hw[0], out_hw[1])
    else:
        final = AnomalyMap(grid=combined, resolution_tag="patch")
    if cfg.smooth_sigma > 0:
        final = AnomalyMap(
            grid=np.clip(gaussian_smooth(final.grid, cfg.smooth_sigma), 0.0, 1.0),
            resolution_tag=final.resolution_tag,
        )
    final.validate()
    return InferResult(map_final=final, per_layer=per_layer, weights=weights, degenerate=degenerate)


# ---------------------------------------------------------------------------
# Map export


def save_anomaly_map(path: str, image_id: str, amap: AnomalyMap) -> None:
    sclp_write(
        path,
        "anomaly_map",
        {"image_id": image_id, "resolution_tag": amap.resolution_tag},
        [("grid", amap.grid)],
    )


def load_anomaly_map(path: str) -> tuple[str, AnomalyMap]:
    kind, meta, tensors = sclp_read(path)
    if kind != "anomaly_map":
        raise EfaError(f"{path} is not an anomaly map")
    amap = AnomalyMap(grid=tensors["grid"].astype(np.float64), resolution_tag=meta["resolution_tag"])
    return meta["image_id"], amap


def save_heatmap_png(path: str, amap: AnomalyMap) -> None:
    from PIL import Image

    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    arr = np.clip(np.rint(_as_grid(amap) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PNG")
