"""Iterative gradient-sign attacks on iris codes through the surrogate.

Each iteration runs the frozen surrogate on the current adversarial iris
and mask, restricts the adversarial loss to bits that still resist the
attack, steps the iris by ``epsilon * sign(grad)`` with clipping to
[0, 1], drops saturated pixels from the mask and re-checks the
termination criterion with the conventional encoder.

Direction conventions: the non-targeted attack ascends the distance
between the soft code and the benign code; the targeted attack descends
the distance to the target code.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np

from .autodiff import Tensor, backward, ops
from .codec import FilterBank, IrisCode, IrisSample, encode
from .matcher import BitLocationSet, EmptyMaskError, masked_hamming, subset_hamming
from .surrogate import Surrogate, binarize

Mode = Literal["non-targeted", "targeted"]

NON_TARGETED_DELTA = 0.32
TARGETED_DELTA = 0.25
VERIFY_DELTA = 0.32


class AttackError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    max_iterations: int = 300
    scenario: int = 1
    mode: Mode = "non-targeted"
    delta: float | None = None
    subset: BitLocationSet | None = None
    secret_count: int = 1024
    secret_margin_z: float = 2.0
    binarize_threshold: float = 0.5

    def __post_init__(self):
        if self.delta is None:
            object.__setattr__(self, "delta", TARGETED_DELTA if self.mode == "targeted" else NON_TARGETED_DELTA)
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.scenario not in (1, 2, 3):
            raise ValueError(f"scenario must be 1, 2 or 3, got {self.scenario}")
        if self.mode not in ("non-targeted", "targeted"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.scenario == 2 and self.subset is None:
            raise ValueError("scenario 2 needs the attacker's bit locations")
        if self.scenario != 2 and self.subset is not None:
            raise ValueError(f"scenario {self.scenario} attacks the whole code; no subset allowed")

    @property
    def targeted(self) -> bool:
        return self.mode == "targeted"

    @property
    def direction(self) -> int:
        # +1 descends the loss, -1 ascends it
        return 1 if self.targeted else -1

    def secret_margin(self, usable_fraction: float = 1.0) -> float:
        """Safety margin the scenario-3 attacker adds to its own full-code criterion.

        Two standard errors of a Hamming fraction measured on the secret
        subset, whose usable size the attacker estimates as
        ``secret_count * usable_fraction`` from its own code masks.
        """
        d = self.delta
        n = max(self.secret_count * usable_fraction, 1.0)
        return self.secret_margin_z * float(np.sqrt(d * (1 - d) / n))


@dataclass
class AttackState:
    n: int
    iris: np.ndarray
    mask: np.ndarray
    soft: np.ndarray
    restriction: np.ndarray
    gradient: np.ndarray
    loss: float
    benign: IrisSample
    reference: np.ndarray


@dataclass
class TraceRow:
    n: int
    loss: float
    hd: float
    mask_popcount: int
    flipped: int


@dataclass
class AttackResult:
    success: bool
    iterations: int
    reason: str
    iris: np.ndarray
    mask: np.ndarray
    soft_code: np.ndarray
    code: IrisCode
    dist: float
    hd: float
    hd_full: float
    hd_subset: float | None = None
    secret_hd: float | None = None
    verifier_subset: BitLocationSet | None = None
    trace: list[TraceRow] = field(default_factory=list)

    @property
    def sample(self) -> IrisSample:
        return IrisSample(self.iris, self.mask)


# ---------------------------------------------------------------- pieces


def unflipped_bits(soft: np.ndarray, bits: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """1 where the binarized soft code still equals ``bits``."""
    soft, bits = np.asarray(soft), np.asarray(bits)
    if soft.shape != bits.shape:
        raise ValueError(f"soft code {soft.shape} and code {bits.shape} differ in shape")
    return (binarize(soft, threshold) == bits).astype(np.uint8)


def adversarial_loss(soft: Tensor, reference: np.ndarray, restriction: np.ndarray) -> tuple[Tensor, bool]:
    """``||reference - soft||_2`` over the restricted bits.

    Returns the loss and a flag that is True when the restriction is empty,
    i.e. no bit is left to work on.
    """
    restriction = np.asarray(restriction).reshape(soft.shape)
    if not restriction.any():
        return Tensor(np.zeros((), dtype=soft.dtype)), True
    ref = Tensor(np.asarray(reference, dtype=soft.dtype).reshape(soft.shape))
    keep = Tensor(restriction.astype(soft.dtype))
    return ops.l2_norm(ops.mul(ops.sub(ref, soft), keep)), False


def igsm_step(prev: np.ndarray, grad: np.ndarray, epsilon: float, direction: int = 1) -> np.ndarray:
    """``clip(prev - direction * epsilon * sign(grad), 0, 1)`` with sign(0) = 0."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    grad = np.asarray(grad)
    if grad.shape != np.shape(prev):
        raise ValueError(f"gradient {grad.shape} does not match image {np.shape(prev)}")
    if not np.all(np.isfinite(grad)):
        raise AttackError("non-finite input gradient")
    return np.clip(prev - direction * epsilon * np.sign(grad), 0.0, 1.0)


def update_mask(prev_mask: np.ndarray, current: np.ndarray, benign: np.ndarray) -> np.ndarray:
    """Drop pixels the attack has driven to 0 or 1 unless they started there."""
    prev_mask = np.asarray(prev_mask)
    saturated = ((current == 0) & (benign != 0)) | ((current == 1) & (benign != 1))
    return ((prev_mask != 0) & ~saturated).astype(np.uint8)


def attack_distance(benign: np.ndarray, adversarial: np.ndarray, mask: np.ndarray,
                    target_mask: np.ndarray | None = None) -> float:
    """Perturbation L2 norm per valid mask pixel (jointly valid with the target if given)."""
    valid = np.asarray(mask).astype(bool)
    if target_mask is not None:
        valid &= np.asarray(target_mask).astype(bool)
    denom = int(valid.sum())
    if denom == 0:
        raise ValueError("distance undefined: the mask has no valid pixel")
    return float(np.linalg.norm(np.asarray(benign, dtype=np.float64) - adversarial)) / denom


def input_gradient(net: Surrogate, iris: np.ndarray, mask: np.ndarray, reference: np.ndarray,
                   restriction_fn: Callable[[np.ndarray], np.ndarray]):
    """Soft code, restriction, loss value, d(loss)/d(iris) and the all-flipped flag."""
    dtype = net.params["conv1.dw"].dtype
    x = Tensor(iris[None].astype(dtype), requires_grad=True)
    soft = net.forward(x, Tensor(mask[None].astype(dtype)), training=False)
    restriction = restriction_fn(soft.data[0])
    loss, empty = adversarial_loss(soft, reference, restriction)
    if empty:
        return soft.data[0], restriction, 0.0, np.zeros_like(iris), True
    backward(loss)
    return soft.data[0], restriction, loss.item(), x.grad[0].astype(np.float64), False


# ---------------------------------------------------------------- driver


def _frozen(net: Surrogate) -> Surrogate:
    params = {k: Tensor(v.data, name=v.name) for k, v in net.params.items()}
    return Surrogate(net.config, params, net.stats)


def run_attack(benign: IrisSample, net: Surrogate, bank: FilterBank, config: AttackConfig,
               target: IrisSample | None = None, verifier_subset: BitLocationSet | None = None,
               seed: int = 0, callback: Callable[[AttackState], None] | None = None) -> AttackResult:
    """Attack ``benign`` until the termination criterion holds or the cap is reached.

    Non-targeted runs stop once the conventional code of the adversarial
    iris is farther than ``delta`` from the benign code; targeted runs stop
    once it is closer than ``delta`` to the code of ``target``. In
    scenario 2 both criteria are measured on ``config.subset``. In
    scenario 3 the verifier compares on a secret subset (drawn from
    ``seed`` unless given); the attacker, blind to it, stops on its
    full-code distance with a sampling margin, and success also requires
    the secret comparison to pass.
    """
    if config.targeted and target is None:
        raise ValueError("a targeted attack needs a target sample")
    net = _frozen(net)
    thr = config.binarize_threshold
    benign_code = encode(benign, bank)
    ref_code = encode(target, bank) if config.targeted else benign_code
    shape = ref_code.shape
    if config.subset is not None:
        config.subset.check_bounds(shape)
    subset_mask = config.subset.as_mask(shape) if config.subset is not None else None

    if config.scenario == 3 and verifier_subset is None:
        verifier_subset = BitLocationSet.random(shape, config.secret_count, np.random.default_rng(seed))

    def restriction(soft: np.ndarray) -> np.ndarray:
        agree = unflipped_bits(soft, ref_code.bits, thr)
        r = (1 - agree) if config.targeted else agree
        return r & subset_mask if subset_mask is not None else r

    def better(hd: float, bound: float) -> bool:
        return hd < bound if config.targeted else hd > bound

    def evaluate(code: IrisCode):
        """(criterion met, operand, full hd, subset hd, secret hd)."""
        full, n_joint = masked_hamming(code, ref_code)
        sub = secret = None
        if config.scenario == 1:
            return better(full, config.delta), full, full, None, None
        if config.scenario == 2:
            sub = subset_hamming(code, ref_code, config.subset)[0]
            return better(sub, config.delta), sub, full, sub, None
        secret = subset_hamming(code, ref_code, verifier_subset)[0]
        margin = config.secret_margin(n_joint / code.bits.size)
        bound = config.delta - margin if config.targeted else config.delta + margin
        met = better(full, bound) and better(secret, config.delta)
        return met, full, full, None, secret

    iris = benign.iris.copy()
    mask = benign.mask.copy()
    target_mask = target.mask if config.targeted else None
    trace: list[TraceRow] = []
    reason = "max-iterations"
    success = False
    n = 0
    code = benign_code
    hd = hd_full = 0.0
    hd_sub = secret_hd = None
    soft = None
    while n < config.max_iterations:
        soft, restrict, loss, grad, empty = input_gradient(net, iris, mask, ref_code.bits, restriction)
        if empty:
            reason = "all-flipped"
            break
        n += 1
        iris = igsm_step(iris, grad, config.epsilon, config.direction)
        mask = update_mask(mask, iris, benign.iris)
        code = encode(IrisSample(iris, mask), bank)
        try:
            met, hd, hd_full, hd_sub, secret_hd = evaluate(code)
        except EmptyMaskError:
            reason = "empty-mask"
            break
        flipped = int((binarize(soft, thr) != benign_code.bits).sum())
        trace.append(TraceRow(n, loss, hd, int(mask.sum()), flipped))
        if callback is not None:
            callback(AttackState(n, iris, mask, soft, restrict, grad, loss, benign, ref_code.bits))
        if met:
            success, reason = True, "success"
            break

    final_soft = net.soft_code(IrisSample(iris, mask))
    dist = attack_distance(benign.iris, iris, benign.mask, target_mask)
    return AttackResult(success, n, reason, iris, mask, final_soft, code, dist, hd, hd_full,
                        hd_sub, secret_hd, verifier_subset, trace)


def reverify(result: AttackResult, benign: IrisSample, bank: FilterBank, config: AttackConfig,
             target: IrisSample | None = None) -> bool:
    """Recompute the termination inequality from scratch with the conventional codec."""
    ref = encode(target, bank) if config.targeted else encode(benign, bank)
    adv = encode(IrisSample(result.iris, result.mask), bank)
    if config.scenario == 2:
        hd, n = subset_hamming(adv, ref, config.subset)
    else:
        hd, n = masked_hamming(adv, ref)
    if config.targeted:
        ok = hd < config.delta
    else:
        ok = hd > config.delta
    if config.scenario == 3:
        secret = subset_hamming(adv, ref, result.verifier_subset)[0]
        margin = config.secret_margin(n / adv.bits.size)
        if config.targeted:
            ok = hd < config.delta - margin and secret < config.delta
        else:
            ok = hd > config.delta + margin and secret > config.delta
    return ok
