"""Semi-GAN objectives and the MT / ICT / composite consistency terms.

Conventions shared by every consistency loss:

* predictions entering the divergence are K-class distributions (fake class
  removed and renormalised) unless ``renormalize=False``;
* an integer perturbation seed drives both the augmentation draw and the
  dropout masks of the pass it belongs to;
* teacher passes run under ``no_grad`` so the teacher never receives
  gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .nn import ForwardOutput, ParamSet, forward_discriminator, forward_generator

PROB_CLAMP = 1e-12
DIVERGENCES = ("mse", "kl")
CONSISTENCY_KINDS = ("none", "mt", "ict", "composite")
PLACEMENTS = ("prediction", "feature", "both")

Augment = Callable[[np.ndarray, object], np.ndarray]


def identity_augment(x: np.ndarray, seed) -> np.ndarray:
    return x


@dataclass
class MixupSample:
    """Mixing coefficient and the shuffle that pairs ``x_n`` with ``x_m``."""

    lam: float
    permutation: np.ndarray

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"mixup lambda must be in [0, 1], got {self.lam}")
        perm = np.asarray(self.permutation, dtype=np.intp)
        if perm.ndim != 1 or not np.array_equal(np.sort(perm), np.arange(perm.size)):
            raise ValueError("permutation must be a bijection on batch indices")
        self.permutation = perm


@dataclass
class ConsistencyPlacement:
    kind: str = "prediction"
    feature_weight: float = 1.0

    def __post_init__(self):
        if self.kind not in PLACEMENTS:
            raise ValueError(f"placement must be one of {PLACEMENTS}, got {self.kind!r}")
        if self.kind != "prediction" and self.feature_weight <= 0:
            raise ValueError("feature_weight must be positive when feature consistency is on")

    @property
    def uses_prediction(self) -> bool:
        return self.kind in ("prediction", "both")

    @property
    def uses_feature(self) -> bool:
        return self.kind in ("feature", "both")


@dataclass
class ConsistencyConfig:
    """How the consistency term of the discriminator objective is formed."""

    kind: str = "composite"
    divergence: str = "mse"
    placement: ConsistencyPlacement = field(default_factory=ConsistencyPlacement)
    on_labeled: bool = False
    renormalize: bool = True

    def __post_init__(self):
        if self.kind not in CONSISTENCY_KINDS:
            raise ValueError(f"consistency kind must be one of {CONSISTENCY_KINDS}, got {self.kind!r}")
        if self.divergence not in DIVERGENCES:
            raise ValueError(f"divergence must be one of {DIVERGENCES}, got {self.divergence!r}")
        if isinstance(self.placement, dict):
            self.placement = ConsistencyPlacement(**self.placement)


# --------------------------------------------------------------------------
# semi-GAN terms


def _clamped(p: Tensor) -> Tensor:
    return ad.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)


def supervised_loss(probs: Tensor, labels) -> Tensor:
    """Mean negative log-probability of the true class under the (K+1)-way softmax."""
    labels = np.asarray(labels, dtype=np.intp)
    k = probs.shape[1] - 1
    if labels.shape != (probs.shape[0],):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {probs.shape[0]}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    picked = probs[np.arange(labels.size), labels]
    return -ad.mean(ad.log(_clamped(picked)))


def unsupervised_gan_loss(real_probs: Tensor, fake_probs: Tensor) -> Tensor:
    """``-E log p_fake(G(z)) - E log(1 - p_fake(x))`` with the fake class last."""
    k = real_probs.shape[1] - 1
    fake_term = -ad.mean(ad.log(_clamped(fake_probs[:, k])))
    real_term = -ad.mean(ad.log(1.0 - _clamped(real_probs[:, k])))
    return fake_term + real_term


def feature_matching_loss(real_features: Tensor, fake_features: Tensor) -> Tensor:
    """Squared L2 distance between batch-mean feature vectors."""
    if real_features.shape[1:] != fake_features.shape[1:]:
        raise ShapeError(f"feature widths differ: {real_features.shape} vs {fake_features.shape}")
    diff = ad.mean(real_features, axis=0) - ad.mean(fake_features, axis=0)
    return ad.sum(ad.square(diff))


def mixup(u, v, lam: float) -> Tensor:
    """``lam * u + (1 - lam) * v``."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"mixup lambda must be in [0, 1], got {lam}")
    u, v = ad._as_tensor(u), ad._as_tensor(v)
    if u.shape != v.shape:
        raise ShapeError(f"mixup operands differ in shape: {u.shape} vs {v.shape}")
    return lam * u + (1.0 - lam) * v


def divergence(kind: str, student_probs: Tensor, teacher_probs: Tensor) -> Tensor:
    """Distance between prediction batches; the teacher side is a constant target.

    ``mse`` averages squared differences over batch and classes. ``kl`` is
    KL(teacher || student) averaged over the batch.
    """
    if student_probs.shape != teacher_probs.shape:
        raise ShapeError(f"class counts differ: {student_probs.shape} vs {teacher_probs.shape}")
    target = ad.detach(teacher_probs)
    if kind == "mse":
        return ad.mean(ad.square(student_probs - target))
    if kind == "kl":
        t = np.clip(target.data, PROB_CLAMP, 1.0)
        per_row = ad.sum(t * (np.log(t) - ad.log(_clamped(student_probs))), axis=1)
        return ad.mean(per_row)
    raise ValueError(f"unknown divergence {kind!r}")


# --------------------------------------------------------------------------
# consistency terms


def _predictive(out: ForwardOutput, renormalize: bool) -> Tensor:
    return out.class_probs() if renormalize else out.probs


def _combine(student_out: ForwardOutput, target_probs: Tensor, target_features: Tensor, kind: str,
             placement: ConsistencyPlacement, renormalize: bool) -> Tensor:
    terms = []
    if placement.uses_prediction:
        terms.append(divergence(kind, _predictive(student_out, renormalize), target_probs))
    if placement.uses_feature:
        diff = student_out.features - ad.detach(target_features)
        terms.append(placement.feature_weight * ad.mean(ad.square(diff)))
    return terms[0] if len(terms) == 1 else terms[0] + terms[1]


def _teacher_pass(teacher: ParamSet, x: np.ndarray, seed, renormalize: bool) -> tuple[Tensor, Tensor]:
    with ad.no_grad():
        out = forward_discriminator(teacher, x, mode="train", seed=seed)
        return _predictive(out, renormalize), out.features


def mt_consistency(student: ParamSet, teacher: ParamSet, x, xi_seed: int, xi_prime_seed: int,
                   kind: str = "mse", augment: Augment = identity_augment,
                   placement: ConsistencyPlacement | None = None, renormalize: bool = True,
                   student_out: ForwardOutput | None = None) -> Tensor:
    """Student on ``augment(x, xi)`` vs teacher on ``augment(x, xi')``.

    ``student_out`` may carry an already computed student pass on
    ``augment(x, xi)`` with dropout seed ``xi`` so it is not recomputed.
    """
    placement = placement or ConsistencyPlacement()
    x = np.asarray(getattr(x, "data", x))
    if student_out is None:
        student_out = forward_discriminator(student, augment(x, xi_seed), mode="train", seed=xi_seed)
    t_probs, t_feats = _teacher_pass(teacher, augment(x, xi_prime_seed), xi_prime_seed, renormalize)
    return _combine(student_out, t_probs, t_feats, kind, placement, renormalize)


def _interpolation_consistency(student, teacher, xm, xn, xm_t, xn_t, lam, student_seed, teacher_seed,
                               kind, placement, renormalize) -> Tensor:
    mixed = mixup(xm, xn, lam)
    student_out = forward_discriminator(student, mixed, mode="train", seed=student_seed)
    pm, fm = _teacher_pass(teacher, xm_t, teacher_seed, renormalize)
    pn, fn = _teacher_pass(teacher, xn_t, teacher_seed, renormalize)
    with ad.no_grad():
        target = mixup(pm, pn, lam)
        target_f = mixup(fm, fn, lam)
    return _combine(student_out, target, target_f, kind, placement, renormalize)


def ict_consistency(student: ParamSet, teacher: ParamSet, x, mix: MixupSample, xi_seed: int,
                    kind: str = "mse", augment: Augment = identity_augment,
                    placement: ConsistencyPlacement | None = None, renormalize: bool = True,
                    teacher_seed: int | None = None) -> Tensor:
    """Interpolation consistency with one shared augmentation ``xi``.

    ``x_m = augment(x, xi)`` and ``x_n = x_m[permutation]``. The teacher's
    dropout seed defaults to ``xi``.
    """
    placement = placement or ConsistencyPlacement()
    x = np.asarray(getattr(x, "data", x))
    xm = augment(x, xi_seed)
    xn = xm[mix.permutation]
    tseed = xi_seed if teacher_seed is None else teacher_seed
    return _interpolation_consistency(student, teacher, xm, xn, xm, xn, mix.lam, xi_seed, tseed,
                                      kind, placement, renormalize)


def composite_consistency_pairs(student: ParamSet, teacher: ParamSet, xm, xn, xm_t, xn_t, lam: float,
                                xi_seed: int, xi_prime_seed: int, kind: str = "mse",
                                placement: ConsistencyPlacement | None = None,
                                renormalize: bool = True) -> Tensor:
    """Composite consistency on explicit student pairs ``(xm, xn)`` and teacher pairs ``(xm_t, xn_t)``."""
    return _interpolation_consistency(student, teacher, np.asarray(xm), np.asarray(xn), np.asarray(xm_t),
                                      np.asarray(xn_t), lam, xi_seed, xi_prime_seed, kind,
                                      placement or ConsistencyPlacement(), renormalize)


def composite_consistency(student: ParamSet, teacher: ParamSet, x, mix: MixupSample, xi_seed: int,
                          xi_prime_seed: int, kind: str = "mse", augment: Augment = identity_augment,
                          placement: ConsistencyPlacement | None = None, renormalize: bool = True) -> Tensor:
    """Interpolation consistency with independent augmentations per branch.

    Student mixes ``augment(x, xi)`` with its shuffle; the teacher predicts on
    ``augment(x, xi')`` and its shuffle (same permutation) and the two
    predictions are mixed with the same ``lam``.
    """
    x = np.asarray(getattr(x, "data", x))
    xs = augment(x, xi_seed)
    xt = augment(x, xi_prime_seed)
    perm = mix.permutation
    return composite_consistency_pairs(student, teacher, xs, xs[perm], xt, xt[perm], mix.lam,
                                       xi_seed, xi_prime_seed, kind, placement, renormalize)


# --------------------------------------------------------------------------
# full objectives


@dataclass
class DiscriminatorTerms:
    supervised: float
    unsupervised: float
    consistency: float
    weighted_consistency: float
    total: float

    def as_dict(self) -> dict[str, float]:
        return dict(self.__dict__)


def labeled_seed(xi_seed: int) -> tuple[int, int]:
    return (int(xi_seed), 1)


def fake_seed(xi_seed: int) -> tuple[int, int]:
    return (int(xi_seed), 2)


def consistency_loss(cfg: ConsistencyConfig, student: ParamSet, teacher: ParamSet, x: np.ndarray,
                     xi_seed: int, xi_prime_seed: int, mix: MixupSample | None, augment: Augment,
                     student_out: ForwardOutput | None = None) -> Tensor:
    if cfg.kind == "mt":
        return mt_consistency(student, teacher, x, xi_seed, xi_prime_seed, cfg.divergence, augment,
                              cfg.placement, cfg.renormalize, student_out=student_out)
    if mix is None:
        raise ValueError(f"{cfg.kind} consistency needs a MixupSample")
    if cfg.kind == "ict":
        return ict_consistency(student, teacher, x, mix, xi_seed, cfg.divergence, augment, cfg.placement,
                               cfg.renormalize, teacher_seed=xi_prime_seed)
    if cfg.kind == "composite":
        return composite_consistency(student, teacher, x, mix, xi_seed, xi_prime_seed, cfg.divergence, augment,
                                     cfg.placement, cfg.renormalize)
    raise ValueError(f"no consistency loss for kind {cfg.kind!r}")


def discriminator_total_loss(student: ParamSet, teacher: ParamSet, labeled_x, labels, unlabeled_x, fake_x,
                             lambda_cons_effective: float, cfg: ConsistencyConfig, xi_seed: int,
                             xi_prime_seed: int, mix: MixupSample | None = None,
                             augment: Augment = identity_augment) -> tuple[Tensor, DiscriminatorTerms]:
    """Semi-GAN discriminator loss plus weighted consistency.

    One student perturbation seed ``xi`` is shared by the supervised, real
    and consistency passes; labeled and fake passes use seeds derived from it.
    ``fake_x`` is treated as data (no gradient reaches the generator).
    """
    if lambda_cons_effective < 0:
        raise ValueError(f"consistency weight must be non-negative, got {lambda_cons_effective}")
    labeled_x = np.asarray(getattr(labeled_x, "data", labeled_x))
    unlabeled_x = np.asarray(getattr(unlabeled_x, "data", unlabeled_x))
    fake_x = np.asarray(getattr(fake_x, "data", fake_x))

    lab_out = forward_discriminator(student, augment(labeled_x, labeled_seed(xi_seed)), mode="train",
                                    seed=labeled_seed(xi_seed))
    real_out = forward_discriminator(student, augment(unlabeled_x, xi_seed), mode="train", seed=xi_seed)
    fake_out = forward_discriminator(student, fake_x, mode="train", seed=fake_seed(xi_seed))
    sup = supervised_loss(lab_out.probs, labels)
    unsup = unsupervised_gan_loss(real_out.probs, fake_out.probs)
    base = sup + unsup

    if cfg.kind == "none":
        cons_value, weighted, total = 0.0, 0.0, base
    else:
        cons_x = np.concatenate([unlabeled_x, labeled_x]) if cfg.on_labeled else unlabeled_x
        cons_mix = mix
        if cfg.on_labeled and mix is not None:
            cons_mix = _extend_mix(mix, cons_x.shape[0], xi_seed)
        reuse = real_out if (cfg.kind == "mt" and not cfg.on_labeled) else None
        if lambda_cons_effective == 0.0:
            with ad.no_grad():
                cons = consistency_loss(cfg, student, teacher, cons_x, xi_seed, xi_prime_seed, cons_mix, augment)
            cons_value, weighted, total = cons.item(), 0.0, base
        else:
            cons = consistency_loss(cfg, student, teacher, cons_x, xi_seed, xi_prime_seed, cons_mix, augment,
                                    student_out=reuse)
            weighted_t = lambda_cons_effective * cons
            total = base + weighted_t
            cons_value, weighted = cons.item(), weighted_t.item()
    terms = DiscriminatorTerms(sup.item(), unsup.item(), cons_value, weighted, total.item())
    return total, terms


def _extend_mix(mix: MixupSample, n: int, seed: int) -> MixupSample:
    """Permutation over a batch enlarged with labeled samples, keeping the original pairing."""
    b = mix.permutation.size
    if n == b:
        return mix
    rng = np.random.default_rng((int(seed), 3))
    extra = b + rng.permutation(n - b)
    return MixupSample(mix.lam, np.concatenate([mix.permutation, extra]))


def generator_total_loss(student: ParamSet, generator: ParamSet, unlabeled_x, z, real_seed=0,
                         fake_seed_=1) -> Tensor:
    """Feature matching against the current student; the student is frozen here."""
    frozen = student.detached()
    with ad.no_grad():
        real_feats = forward_discriminator(frozen, unlabeled_x, mode="train", seed=real_seed).features
    fake = forward_generator(generator, z, mode="train")
    fake_feats = forward_discriminator(frozen, fake, mode="train", seed=fake_seed_).features
    return feature_matching_loss(real_feats, fake_feats)
