"""Seeded synthetic normalized irises.

An identity is a band-limited texture: a sum of 2-D sinusoids whose
angular wavelengths span 4..64 px, with integer cycle counts around the
angular axis so the texture wraps seamlessly. A capture of that identity
adds white texture noise, a radial illumination ramp and eyelid-like
occlusion arcs cut from the mask.

Every level is seeded from the one above it (master -> identity/eye ->
sample), so any sample can be regenerated on its own.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .codec import FilterBank, IrisCode, IrisSample, encode
from .matcher import EmptyMaskError, masked_hamming

EYES = ("L", "R")
N_COMPONENTS = 48
MIN_WAVELENGTH, MAX_WAVELENGTH = 4.0, 64.0
MAX_OCCLUSION = 0.30
# frozen by calibrate_noise() on the desk profile; see tests/test_synth.py
DEFAULT_NOISE = 0.15625


class CalibrationError(RuntimeError):
    def __init__(self, message: str, stats: "CorpusStats"):
        super().__init__(f"{message}\n{stats.summary()}")
        self.stats = stats


@dataclass(frozen=True)
class IdentityParams:
    seed: tuple[int, ...]
    cycles_x: np.ndarray     # integer cycles around the angular axis
    cycles_y: np.ndarray     # real cycles over the radial extent
    amplitudes: np.ndarray
    phases: np.ndarray
    contrast: float

    @classmethod
    def draw(cls, *seed: int, width: int = 128, n_components: int = N_COMPONENTS) -> "IdentityParams":
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        lo = max(1, int(round(width / MAX_WAVELENGTH)))
        hi = max(lo, int(round(width / MIN_WAVELENGTH)))
        # log-uniform over angular frequency so every filter scale sees energy
        kx = np.round(np.exp(rng.uniform(np.log(lo), np.log(hi + 0.5), n_components))).astype(int)
        kx = np.clip(kx, lo, hi)
        ky = rng.uniform(-1.5, 1.5, n_components)
        amp = rng.rayleigh(1.0, n_components)
        phase = rng.uniform(0, 2 * np.pi, n_components)
        contrast = float(rng.uniform(0.08, 0.12))
        return cls(tuple(seed), kx, ky, amp, phase, contrast)

    def texture(self, height: int, width: int) -> np.ndarray:
        y = (np.arange(height) / height)[:, None, None]
        x = (np.arange(width) / width)[None, :, None]
        t = (self.amplitudes * np.cos(2 * np.pi * (self.cycles_x * x + self.cycles_y * y) + self.phases)).sum(-1)
        t = (t - t.mean()) / t.std()
        return 0.5 + self.contrast * t


@dataclass(frozen=True)
class SampleNoise:
    seed: tuple[int, ...]
    level: float                        # std of additive white noise
    ramp: float = 0.0                   # radial illumination slope
    offset: float = 0.0                 # global brightness shift
    arcs: tuple[tuple[float, float, float], ...] = ()   # (centre col, half width, depth) in px

    @classmethod
    def draw(cls, *seed: int, level: float = DEFAULT_NOISE, height: int = 16, width: int = 128,
             max_arcs: int = 2) -> "SampleNoise":
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        ramp = float(rng.uniform(-0.05, 0.05))
        offset = float(rng.uniform(-0.03, 0.03))
        arcs = []
        for _ in range(int(rng.integers(0, max_arcs + 1))):
            arcs.append((float(rng.uniform(0, width)),
                         float(rng.uniform(width / 16, width / 6)),
                         float(rng.uniform(1.0, height / 3))))
        return cls(tuple(seed), float(level), ramp, offset, tuple(arcs))

    @classmethod
    def none(cls) -> "SampleNoise":
        return cls((), 0.0)


def occlusion_mask(arcs, height: int, width: int) -> np.ndarray:
    """All-ones mask minus parabolic eyelid arcs hanging from the outer rows."""
    mask = np.ones((height, width), dtype=np.uint8)
    cols = np.arange(width)
    rows = np.arange(height)[:, None]
    for centre, half, depth in arcs:
        d = np.abs((cols - centre + width / 2) % width - width / 2)
        reach = depth * np.clip(1 - (d / half) ** 2, 0, None)
        mask[(rows >= height - reach[None, :]) & (reach[None, :] > 0)] = 0
    return mask


def render_sample(identity: IdentityParams, noise: SampleNoise, extents=(16, 128)) -> IrisSample:
    h, w = extents
    iris = identity.texture(h, w)
    if noise.level > 0:
        rng = np.random.default_rng(np.random.SeedSequence(noise.seed))
        iris = iris + rng.normal(0.0, noise.level, (h, w))
    iris = iris + noise.offset + noise.ramp * (np.arange(h)[:, None] / max(h - 1, 1) - 0.5)
    mask = occlusion_mask(noise.arcs, h, w)
    if 1 - mask.mean() > MAX_OCCLUSION:
        # shallower arcs until the occluded fraction is acceptable
        arcs = list(noise.arcs)
        while arcs and 1 - mask.mean() > MAX_OCCLUSION:
            arcs = [(c, hw, d * 0.8) for c, hw, d in arcs]
            mask = occlusion_mask(arcs, h, w)
    return IrisSample(np.clip(iris, 0.0, 1.0), mask)


# ---------------------------------------------------------------- corpora


@dataclass(frozen=True)
class CorpusRecord:
    identity: int
    eye: str
    index: int
    sample: IrisSample
    code: IrisCode

    @property
    def key(self) -> str:
        return f"{self.identity:04d}{self.eye}{self.index:02d}"


@dataclass
class CorpusStats:
    genuine: np.ndarray = field(default_factory=lambda: np.zeros(0))
    impostor: np.ndarray = field(default_factory=lambda: np.zeros(0))
    threshold: float = 0.32

    @property
    def false_reject(self) -> float:
        return float((self.genuine >= self.threshold).mean()) if self.genuine.size else 0.0

    @property
    def false_accept(self) -> float:
        return float((self.impostor < self.threshold).mean()) if self.impostor.size else 0.0

    @property
    def overlap(self) -> float:
        return max(self.false_reject, self.false_accept)

    def summary(self) -> str:
        def desc(a):
            if a.size == 0:
                return "n=0"
            return f"n={a.size} mean={a.mean():.4f} std={a.std():.4f} min={a.min():.4f} max={a.max():.4f}"

        return (f"genuine HD: {desc(self.genuine)}\nimpostor HD: {desc(self.impostor)}\n"
                f"at threshold {self.threshold}: false reject {self.false_reject:.4f}, "
                f"false accept {self.false_accept:.4f}")


@dataclass
class Corpus:
    records: list[CorpusRecord]
    extents: tuple[int, int]
    master_seed: int
    noise_level: float
    stats: CorpusStats

    def __len__(self):
        return len(self.records)

    def identities(self) -> list[int]:
        return sorted({r.identity for r in self.records})

    def by_key(self, key: str) -> CorpusRecord:
        for r in self.records:
            if r.key == key:
                return r
        raise KeyError(key)

    def split(self, train_fraction: float = 0.8) -> tuple[list[CorpusRecord], list[CorpusRecord]]:
        """Identity-disjoint split; the first identities go to training."""
        ids = self.identities()
        cut = int(round(train_fraction * len(ids)))
        train_ids = set(ids[:cut])
        train = [r for r in self.records if r.identity in train_ids]
        test = [r for r in self.records if r.identity not in train_ids]
        return train, test


def pair_statistics(records: list[CorpusRecord], max_impostor_pairs: int = 4000,
                    seed: int = 0, threshold: float = 0.32) -> CorpusStats:
    groups: dict[tuple[int, str], list[CorpusRecord]] = {}
    for r in records:
        groups.setdefault((r.identity, r.eye), []).append(r)
    genuine = []
    for members in groups.values():
        for a, b in combinations(members, 2):
            try:
                genuine.append(masked_hamming(a.code, b.code)[0])
            except EmptyMaskError:
                pass
    impostor = []
    n = len(records)
    if n > 1:
        rng = np.random.default_rng(seed)
        tries = 0
        while len(impostor) < max_impostor_pairs and tries < 4 * max_impostor_pairs:
            tries += 1
            i, j = rng.choice(n, 2, replace=False)
            a, b = records[i], records[j]
            if a.identity == b.identity:
                continue
            try:
                impostor.append(masked_hamming(a.code, b.code)[0])
            except EmptyMaskError:
                pass
    return CorpusStats(np.array(genuine), np.array(impostor), threshold)


def corpus_sample(master_seed: int, identity: int, eye: str, index: int, extents=(16, 128),
                  noise_level: float = DEFAULT_NOISE) -> IrisSample:
    h, w = extents
    e = EYES.index(eye)
    ident = IdentityParams.draw(master_seed, identity, e, width=w)
    noise = SampleNoise.draw(master_seed, identity, e, 1000 + index, level=noise_level, height=h, width=w)
    return render_sample(ident, noise, extents)


def generate_corpus(n_identities: int, samples_per_identity: int, master_seed: int, bank: FilterBank,
                    extents=(16, 128), eyes=EYES, noise_level: float = DEFAULT_NOISE,
                    check: bool = True, max_overlap: float = 0.05) -> Corpus:
    """Render ``n_identities x len(eyes) x samples_per_identity`` samples and their codes.

    With ``check`` set, the genuine/impostor Hamming distributions must
    overlap by less than ``max_overlap`` at 0.32 or :class:`CalibrationError`
    is raised carrying the statistics.
    """
    if n_identities < 1 or samples_per_identity < 1:
        raise ValueError("corpus counts must be at least 1")
    records = []
    for ident in range(n_identities):
        for eye in eyes:
            for k in range(samples_per_identity):
                s = corpus_sample(master_seed, ident, eye, k, extents, noise_level)
                records.append(CorpusRecord(ident, eye, k, s, encode(s, bank)))
    stats = pair_statistics(records, seed=master_seed)
    corpus = Corpus(records, tuple(extents), master_seed, noise_level, stats)
    if check and stats.overlap >= max_overlap:
        raise CalibrationError("genuine and impostor distributions overlap too much", stats)
    return corpus


def calibrate_noise(bank: FilterBank, extents=(16, 128), target=(0.10, 0.25), n_identities: int = 20,
                    samples: int = 4, master_seed: int = 12345, lo: float = 0.0, hi: float = 0.5,
                    max_steps: int = 30) -> tuple[float, CorpusStats]:
    """Bisect the noise level until the genuine mean HD lands inside ``target``."""
    mid_target = 0.5 * (target[0] + target[1])
    for _ in range(max_steps):
        mid = 0.5 * (lo + hi)
        c = generate_corpus(n_identities, samples, master_seed, bank, extents, noise_level=mid, check=False)
        g = c.stats.genuine.mean()
        if target[0] <= g <= target[1] and abs(g - mid_target) < 0.02:
            return mid, c.stats
        if g < mid_target:
            lo = mid
        else:
            hi = mid
    return mid, c.stats
