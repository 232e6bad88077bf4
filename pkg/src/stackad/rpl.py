"""Regularized prompt learning for image-level classification.

A learnable normal/abnormal embedding pair is trained with cross-entropy
on CLS cosine logits plus an MSE pull toward the frozen single-cluster
stacked-prompt embedding. Operates purely in output-embedding space; the
text encoder stays behind the file boundary.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .efa import AdamState, TrainConfig, _sigmoid, adam_step
from .store import KIND_RPL, TextFeature, l2_normalize, sclp_read, sclp_write

PROB_CLAMP = 1e-7


class RplError(Exception):
    pass


@dataclass
class RplConfig:
    lr: float = 1e-4
    epochs: int = 2
    batch_size: int = 16
    logit_scale: float = 100.0
    noise_scale: float = 0.02
    text_weight: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_json(cls, obj: dict) -> "RplConfig":
        return cls(**{k: v for k, v in obj.items() if k in cls.__dataclass_fields__})

    def as_train_config(self) -> TrainConfig:
        return TrainConfig(
            lr=self.lr,
            logit_scale=self.logit_scale,
            beta1=self.beta1,
            beta2=self.beta2,
            adam_eps=self.adam_eps,
            seed=self.seed,
        )


@dataclass
class LearnablePromptPair:
    t_prime_normal: np.ndarray
    t_prime_abnormal: np.ndarray
    reference: TextFeature

    @property
    def d(self) -> int:
        return int(self.t_prime_normal.shape[0])

    def save(self, path: str) -> None:
        sclp_write(
            path,
            KIND_RPL,
            {"reference_key": self.reference.prompt_key},
            [
                ("t_prime_normal", self.t_prime_normal),
                ("t_prime_abnormal", self.t_prime_abnormal),
                ("reference_normal", self.reference.normal),
                ("reference_abnormal", self.reference.abnormal),
            ],
        )

    @classmethod
    def load(cls, path: str) -> "LearnablePromptPair":
        kind, meta, tensors = sclp_read(path)
        if kind != KIND_RPL:
            raise RplError(f"{path} is not an rpl pair (kind={kind!r})")
        ref = TextFeature(
            prompt_key=meta["reference_key"],
            normal=tensors["reference_normal"].astype(np.float64),
            abnormal=tensors["reference_abnormal"].astype(np.float64),
        )
        return cls(
            t_prime_normal=tensors["t_prime_normal"].astype(np.float64),
            t_prime_abnormal=tensors["t_prime_abnormal"].astype(np.float64),
            reference=ref,
        )


def init_prompts(reference: TextFeature, seed: int, noise_scale: float = 0.02) -> LearnablePromptPair:
    """Start both channels at the reference plus seeded Gaussian noise."""
    reference.validate()
    digest = hashlib.sha256(f"rpl-init\x1f{seed}".encode()).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    d = reference.normal.shape[0]
    return LearnablePromptPair(
        t_prime_normal=np.asarray(reference.normal, np.float64)
        + noise_scale * rng.standard_normal(d),
        t_prime_abnormal=np.asarray(reference.abnormal, np.float64)
        + noise_scale * rng.standard_normal(d),
        reference=reference,
    )


def _cosines(cls: np.ndarray, pair: LearnablePromptPair) -> tuple[float, float, bool]:
    c_hat, zero = l2_normalize(np.asarray(cls, dtype=np.float64))
    if bool(zero):
        return 0.0, 0.0, True
    n_hat, n_zero = l2_normalize(pair.t_prime_normal)
    a_hat, a_zero = l2_normalize(pair.t_prime_abnormal)
    cos_n = 0.0 if bool(n_zero) else float(c_hat @ n_hat)
    cos_a = 0.0 if bool(a_zero) else float(c_hat @ a_hat)
    return cos_n, cos_a, False


def classify(cls: np.ndarray, pair: LearnablePromptPair, logit_scale: float = 100.0) -> tuple[float, bool]:
    """Probability the image is anomalous, plus a zero-CLS degeneracy flag."""
    cos_n, cos_a, degenerate = _cosines(cls, pair)
    if degenerate:
        return 0.5, True
    p = float(_sigmoid(np.asarray([logit_scale * (cos_a - cos_n)]))[0])
    return p, False


def image_score(cls: np.ndarray, pair: LearnablePromptPair, logit_scale: float = 100.0) -> float:
    """Alias of classify used when recording per-image scores."""
    return classify(cls, pair, logit_scale)[0]


def rpl_loss(p: float, y: int, pair: LearnablePromptPair, text_weight: float = 1.0) -> dict[str, float]:
    """Cross-entropy plus the both-channel MSE pull toward the reference."""
    pc = min(max(p, PROB_CLAMP), 1.0 - PROB_CLAMP)
    l_ce = -np.log(pc) if y == 1 else -np.log(1.0 - pc)
    d = pair.d
    ref = pair.reference
    l_text = 0.5 * (
        float(((pair.t_prime_normal - ref.normal) ** 2).sum()) / d
        + float(((pair.t_prime_abnormal - ref.abnormal) ** 2).sum()) / d
    )
    return {
        "l_ce": float(l_ce),
        "l_text": float(l_text),
        "l_cls": float(l_ce + text_weight * l_text),
    }


def _ce_grads(
    cls: np.ndarray, y: int, pair: LearnablePromptPair, logit_scale: float
) -> tuple[float, np.ndarray, np.ndarray]:
    """Per-sample cross-entropy value and its gradients wrt both channels."""
    c_hat, zero = l2_normalize(np.asarray(cls, dtype=np.float64))
    d = pair.d
    if bool(zero):
        pc = 0.5
        l_ce = -np.log(pc)
        return float(l_ce), np.zeros(d), np.zeros(d)
    rn = float(np.linalg.norm(pair.t_prime_normal))
    ra = float(np.linalg.norm(pair.t_prime_abnormal))
    n_hat = pair.t_prime_normal / rn if rn > 0 else np.zeros(d)
    a_hat = pair.t_prime_abnormal / ra if ra > 0 else np.zeros(d)
    cos_n = float(c_hat @ n_hat)
    cos_a = float(c_hat @ a_hat)
    p = float(_sigmoid(np.asarray([logit_scale * (cos_a - cos_n)]))[0])
    pc = min(max(p, PROB_CLAMP), 1.0 - PROB_CLAMP)
    l_ce = -np.log(pc) if y == 1 else -np.log(1.0 - pc)
    if not (PROB_CLAMP < p < 1.0 - PROB_CLAMP):
        return float(l_ce), np.zeros(d), np.zeros(d)
    g_delta = logit_scale * (p - y)
    g_a = g_delta * (c_hat - cos_a * a_hat) / ra if ra > 0 else np.zeros(d)
    g_n = -g_delta * (c_hat - cos_n * n_hat) / rn if rn > 0 else np.zeros(d)
    return float(l_ce), g_n, g_a


def train_rpl(
    cls_features: list[np.ndarray],
    labels: list[int],
    reference: TextFeature,
    cfg: RplConfig,
) -> tuple[LearnablePromptPair, list[tuple[int, int, float]], bool]:
    """Adam on the prompt pair; returns (pair, loss curve, single-class flag).

    The loss curve rows are (epoch, step, batch mean l_cls). A single-class
    training set only warns via the returned flag; the text regularizer
    still constrains the run.
    """
    if len(cls_features) != len(labels) or not cls_features:
        raise RplError("cls features and labels must be non-empty and aligned")
    single_class = len(set(labels)) < 2
    pair = init_prompts(reference, cfg.seed, cfg.noise_scale)
    params = {"normal": pair.t_prime_normal, "abnormal": pair.t_prime_abnormal}
    state = AdamState.for_params(params)
    tc = cfg.as_train_config()
    d = pair.d
    curve: list[tuple[int, int, float]] = []
    idx = np.arange(len(cls_features))
    for epoch in range(cfg.epochs):
        digest = hashlib.sha256(f"rpl-shuffle\x1f{cfg.seed}\x1f{epoch}".encode()).digest()
        order = np.random.default_rng(int.from_bytes(digest[:8], "little")).permutation(idx)
        for step, start in enumerate(range(0, len(order), cfg.batch_size)):
            chunk = order[start : start + cfg.batch_size]
            g_n = np.zeros(d)
            g_a = np.zeros(d)
            batch_loss = 0.0
            for i in chunk:
                l_ce, gi_n, gi_a = _ce_grads(cls_features[i], labels[i], pair, cfg.logit_scale)
                g_n += gi_n
                g_a += gi_a
                batch_loss += l_ce
            g_n /= len(chunk)
            g_a /= len(chunk)
            batch_loss /= len(chunk)
            # regularizer: 0.5 * (1/d) * ||t' - t^s||^2 per channel
            g_n += cfg.text_weight * (pair.t_prime_normal - reference.normal) / d
            g_a += cfg.text_weight * (pair.t_prime_abnormal - reference.abnormal) / d
            l_text = 0.5 * (
                float(((pair.t_prime_normal - reference.normal) ** 2).sum()) / d
                + float(((pair.t_prime_abnormal - reference.abnormal) ** 2).sum()) / d
            )
            batch_loss += cfg.text_weight * l_text
            adam_step(state, params, {"normal": g_n, "abnormal": g_a}, cfg.lr, tc)
            curve.append((epoch, step, float(batch_loss)))
    return pair, curve, single_class
