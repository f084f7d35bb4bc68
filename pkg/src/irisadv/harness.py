"""Experiment driver: corpora on disk, training, single attacks and sweeps.

Each ``cmd_*`` function takes an :class:`ExperimentConfig`, writes its
outputs under ``config.out`` and returns a result object; the CLI maps
exceptions onto exit codes. All randomness flows from ``master_seed``
so reruns write byte-identical files.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import io
from .attack import AttackConfig, AttackResult, reverify, run_attack
from .codec import FilterBank, IrisCode, IrisSample, encode, load_filter_bank, make_filter_bank, save_filter_bank
from .matcher import DEFAULT_SUBSET_SIZE, BitLocationSet, EmptyMaskError, masked_hamming, verify
from .surrogate import SurrogateConfig, bit_error_rate, build_surrogate, train_surrogate
from .synth import EYES, CorpusRecord, generate_corpus, pair_statistics

log = logging.getLogger(__name__)

# rows of the distance/iteration table, largest step first
DEFAULT_EPSILONS = (0.03, 0.02, 0.01, 0.007, 0.005, 0.002, 0.001, 0.0007, 0.0005, 0.0002, 0.0001)
DEFAULT_CAPS = (10, 20, 30, 40, 50, 100, 200, 300)
SCHEMA_VERSION = 1

PROFILES = {
    # profile: (extents, Gabor wavelengths)
    "desk": ((16, 128), (16.0,)),
    "full": ((64, 512), (8.0, 16.0, 32.0)),
}


class AttackFailed(RuntimeError):
    """The attack exhausted its iteration cap; the result was still written."""

    def __init__(self, result: AttackResult):
        super().__init__(f"attack did not terminate within {result.iterations} iterations ({result.reason})")
        self.result = result


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in str(text).replace(",", " ").split())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in str(text).replace(",", " ").split())


@dataclass(frozen=True)
class ExperimentConfig:
    profile: str = "desk"
    out: str = "run"
    corpus: str = ""                 # defaults to <out>/corpus
    bank: str = ""                   # filter-bank file; empty = the profile's default bank
    checkpoint: str = ""             # defaults to <out>/surrogate.irsg
    master_seed: int = 0
    identities: int = 200
    samples: int = 5
    noise: float | None = None
    epochs: int | None = None
    lr: float | None = None
    epsilons: tuple[float, ...] = DEFAULT_EPSILONS
    caps: tuple[int, ...] = DEFAULT_CAPS
    scenarios: tuple[int, ...] = (1, 2, 3)
    mode: str = "non-targeted"
    trials: int = 30
    subset_size: int = DEFAULT_SUBSET_SIZE

    _PARSERS = {"master_seed": int, "identities": int, "samples": int, "noise": float,
                "epochs": int, "lr": float, "epsilons": _floats, "caps": _ints,
                "scenarios": _ints, "trials": int, "subset_size": int}

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}; choose from {sorted(PROFILES)}")
        eps = self.epsilons
        if not eps or min(eps) <= 0 or any(a <= b for a, b in zip(eps, eps[1:])):
            raise ValueError(f"epsilons must be positive and strictly descending: {eps}")
        caps = self.caps
        if not caps or min(caps) < 1 or any(a >= b for a, b in zip(caps, caps[1:])):
            raise ValueError(f"caps must be positive and strictly ascending: {caps}")
        if any(s not in (1, 2, 3) for s in self.scenarios):
            raise ValueError(f"scenarios must be drawn from 1, 2, 3: {self.scenarios}")
        if self.mode not in ("non-targeted", "targeted"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.trials < 1:
            raise ValueError("trials must be at least 1")

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def parse_value(cls, key: str, text: str):
        if key not in cls.keys():
            raise KeyError(f"unknown config key {key!r}")
        return cls._PARSERS.get(key, str)(text)

    @classmethod
    def from_file(cls, path, **overrides) -> "ExperimentConfig":
        """Read a flat ``key = value`` file; ``#`` starts a comment."""
        values = {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise io.FormatError(path, 0, f"line {lineno}: expected key = value")
            key, text = (p.strip() for p in line.split("=", 1))
            try:
                values[key] = cls.parse_value(key, text)
            except (KeyError, ValueError) as exc:
                raise io.FormatError(path, 0, f"line {lineno}: {exc}") from None
        values.update(overrides)
        return cls(**values)

    # derived locations and settings

    @property
    def extents(self) -> tuple[int, int]:
        return PROFILES[self.profile][0]

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    @property
    def corpus_dir(self) -> Path:
        return Path(self.corpus) if self.corpus else self.out_dir / "corpus"

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else self.out_dir / "surrogate.irsg"

    def filter_bank(self) -> FilterBank:
        if self.bank:
            return load_filter_bank(self.bank)
        return make_filter_bank(PROFILES[self.profile][1])

    def surrogate_config(self, n_filters: int) -> SurrogateConfig:
        h, w = self.extents
        base = SurrogateConfig.full() if self.profile == "full" else SurrogateConfig.desk()
        cfg = replace(base, height=h, width=w, n_filters=n_filters)
        if self.epochs is not None:
            cfg = replace(cfg, epochs=self.epochs)
        if self.lr is not None:
            cfg = replace(cfg, lr=self.lr)
        return cfg


# ---------------------------------------------------------------- corpus on disk


@dataclass
class LoadedCorpus:
    records: list[CorpusRecord]
    bank: FilterBank
    master_seed: int

    def __post_init__(self):
        self._index = {r.key: r for r in self.records}

    def get(self, key: str) -> CorpusRecord:
        try:
            return self._index[key]
        except KeyError:
            raise KeyError(f"no sample with id {key!r} in the corpus") from None

    def split(self, train_fraction: float = 0.8):
        ids = sorted({r.identity for r in self.records})
        train_ids = set(ids[:int(round(train_fraction * len(ids)))])
        return ([r for r in self.records if r.identity in train_ids],
                [r for r in self.records if r.identity not in train_ids])


def write_corpus(directory, records: Sequence[CorpusRecord], bank: FilterBank, master_seed: int) -> Path:
    d = Path(directory)
    (d / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    for r in records:
        iris, mask = f"images/{r.key}_iris.pgm", f"images/{r.key}_mask.pbm"
        io.write_pgm(d / iris, r.sample.iris)
        io.write_pbm(d / mask, r.sample.mask)
        rows.append((r.identity, r.eye, r.index, iris, mask))
    io.write_manifest(d / "manifest.txt", rows)
    save_filter_bank(bank, d / "filterbank.txt")
    (d / "corpus.txt").write_text(f"master_seed = {master_seed}\n")
    return d / "manifest.txt"


def read_corpus(directory) -> LoadedCorpus:
    """Load images from disk and re-encode them with the stored bank."""
    d = Path(directory)
    if not (d / "manifest.txt").exists():
        raise FileNotFoundError(f"no corpus manifest in {d}")
    bank = load_filter_bank(d / "filterbank.txt")
    meta = {k.strip(): v.strip() for k, v in
            (ln.split("=", 1) for ln in (d / "corpus.txt").read_text().splitlines() if "=" in ln)}
    records = []
    for row in io.read_manifest(d / "manifest.txt"):
        sample = IrisSample(io.read_pgm(d / row["iris"]), io.read_pbm(d / row["mask"]))
        records.append(CorpusRecord(row["identity"], row["eye"], row["sample"], sample, encode(sample, bank)))
    return LoadedCorpus(records, bank, int(meta["master_seed"]))


# ---------------------------------------------------------------- commands


def cmd_gen_data(config: ExperimentConfig):
    """Generate, calibrate and persist a corpus; raises CalibrationError on overlap."""
    bank = config.filter_bank()
    kw = {} if config.noise is None else {"noise_level": config.noise}
    corpus = generate_corpus(config.identities, config.samples, config.master_seed, bank,
                             extents=config.extents, **kw)
    manifest = write_corpus(config.corpus_dir, corpus.records, bank, config.master_seed)
    log.info("wrote %d samples to %s\n%s", len(corpus), manifest.parent, corpus.stats.summary())
    return corpus


@dataclass
class TrainReport:
    bit_error: float
    untrained_bit_error: float
    curve: list[float]
    n_train: int
    n_test: int


def cmd_train(config: ExperimentConfig) -> TrainReport:
    corpus = read_corpus(config.corpus_dir)
    train, test = corpus.split()
    if not test:
        raise ValueError("the corpus needs at least two identities for a held-out split")
    scfg = config.surrogate_config(corpus.bank.n_filters)
    shape = train[0].sample.shape
    if shape != (scfg.height, scfg.width):
        raise ValueError(f"corpus extents {shape} do not match the {config.profile} profile "
                         f"{(scfg.height, scfg.width)}")
    samples, codes = [r.sample for r in train], [r.code for r in train]
    test_s, test_c = [r.sample for r in test], [r.code for r in test]
    untrained = bit_error_rate(build_surrogate(scfg, config.master_seed), test_s, test_c)
    net, curve = train_surrogate(scfg, samples, codes, seed=config.master_seed)
    config.out_dir.mkdir(parents=True, exist_ok=True)
    config.checkpoint_path.parent.mkdir(parents=True, exist_ok=True)
    io.save_checkpoint(config.checkpoint_path, net)
    io.write_csv(config.out_dir / "loss.csv", ["epoch", "loss"],
                 [(i, repr(v)) for i, v in enumerate(curve)])
    # evaluate the checkpoint as stored so a later load reproduces the number
    ber = bit_error_rate(io.load_checkpoint(config.checkpoint_path), test_s, test_c)
    return TrainReport(ber, untrained, curve, len(train), len(test))


@dataclass
class Trial:
    """Everything one attack run needs, all derived from one seed."""

    seed: int
    benign: CorpusRecord
    gallery: CorpusRecord | None
    target: CorpusRecord | None
    subset: BitLocationSet | None


def trial_setup(corpus: LoadedCorpus, pool: Sequence[CorpusRecord], seed: int, scenario: int,
                targeted: bool, subset_size: int, benign_key: str | None = None,
                target_key: str | None = None) -> Trial:
    """Draw benign, gallery, target and scenario-2 subset from ``seed``.

    Explicit keys override the draws, which is how a sweep trial is
    replayed through ``cmd_attack``.
    """
    rng = np.random.default_rng(np.random.SeedSequence([corpus.master_seed, seed]))
    benign = pool[int(rng.integers(len(pool)))]
    if benign_key is not None:
        benign = corpus.get(benign_key)
    same = [r for r in corpus.records if r.identity == benign.identity and r.eye == benign.eye
            and r.index != benign.index]
    gallery = same[int(rng.integers(len(same)))] if same else None
    others = [r for r in corpus.records if r.identity != benign.identity and r.eye == benign.eye]
    target = others[int(rng.integers(len(others)))] if others else None
    if target_key is not None:
        target = corpus.get(target_key)
    if targeted and target is None:
        raise ValueError("no same-eye sample of another identity to target")
    subset = None
    if scenario == 2:
        subset = BitLocationSet.random(benign.code.shape, subset_size, rng)
    return Trial(seed, benign, gallery, target if targeted else None, subset)


def attack_config(config: ExperimentConfig, epsilon: float, scenario: int, subset, cap: int) -> AttackConfig:
    return AttackConfig(epsilon=epsilon, max_iterations=cap, scenario=scenario, mode=config.mode,
                        subset=subset, secret_count=config.subset_size)


def execute_trial(corpus: LoadedCorpus, net, trial: Trial, acfg: AttackConfig) -> AttackResult:
    target = trial.target.sample if trial.target is not None else None
    return run_attack(trial.benign.sample, net, corpus.bank, acfg, target=target, seed=trial.seed)


def gallery_hd(corpus: LoadedCorpus, trial: Trial, result: AttackResult) -> float | None:
    if trial.gallery is None:
        return None
    # the gallery comparison keeps the benign mask, not the attack-eroded one
    adv = encode(IrisSample(result.iris, trial.benign.sample.mask), corpus.bank)
    try:
        return masked_hamming(adv, trial.gallery.code)[0]
    except EmptyMaskError:
        return None


def cmd_attack(config: ExperimentConfig, sample: str, epsilon: float, scenario: int = 1,
               target: str | None = None, seed: int = 0, cap: int = 300) -> AttackResult:
    """Attack one sample and write images, the trace and a verification report.

    Raises :class:`AttackFailed` after writing when the cap is exhausted.
    """
    corpus = read_corpus(config.corpus_dir)
    corpus.get(sample)
    if target is not None:
        corpus.get(target)
    net = io.load_checkpoint(config.checkpoint_path)
    _, test = corpus.split()
    trial = trial_setup(corpus, test or corpus.records, seed, scenario, config.mode == "targeted",
                        config.subset_size, benign_key=sample, target_key=target)
    acfg = attack_config(config, epsilon, scenario, trial.subset, cap)
    result = execute_trial(corpus, net, trial, acfg)

    out = config.out_dir / "attack"
    out.mkdir(parents=True, exist_ok=True)
    io.write_pgm(out / "adversarial_iris.pgm", result.iris)
    io.write_pbm(out / "adversarial_mask.pbm", result.mask)
    io.write_pbm(out / "adversarial_code.pbm", result.code.bits)
    io.write_csv(out / "trace.csv", ["n", "loss", "hd", "mask_popcount", "flipped"],
                 [(r.n, repr(r.loss), repr(r.hd), r.mask_popcount, r.flipped) for r in result.trace])
    (out / "report.txt").write_text(verification_report(corpus, trial, acfg, result))
    if not result.success:
        raise AttackFailed(result)
    return result


def verification_report(corpus: LoadedCorpus, trial: Trial, acfg: AttackConfig, result: AttackResult) -> str:
    """Plain-text report recomputed with the conventional codec."""
    target = trial.target.sample if trial.target is not None else None
    ref = trial.target if trial.target is not None else trial.benign
    adv = encode(result.sample, corpus.bank)
    try:
        hd_ref = masked_hamming(adv, ref.code)[0]
        accepted = verify(hd_ref, 0.32).accepted
        reverified = reverify(result, trial.benign.sample, corpus.bank, acfg, target)
    except EmptyMaskError:
        # the attack eroded every valid code bit; nothing left to compare
        hd_ref, accepted, reverified = None, False, False
    lines = [
        f"sample = {trial.benign.key}",
        f"mode = {acfg.mode}",
        f"scenario = {acfg.scenario}",
        f"epsilon = {acfg.epsilon!r}",
        f"seed = {trial.seed}",
        f"success = {result.success}",
        f"reason = {result.reason}",
        f"iterations = {result.iterations}",
        f"dist = {result.dist!r}",
        f"reference = {ref.key}",
        f"hd_reference = {'undefined' if hd_ref is None else repr(hd_ref)}",
        f"termination_delta = {acfg.delta!r}",
        f"verify_at_0.32 = {'accept' if accepted else 'reject'}",
        f"reverified = {reverified}",
    ]
    if result.hd_subset is not None:
        lines.append(f"hd_subset = {result.hd_subset!r}")
    if result.secret_hd is not None:
        lines.append(f"hd_secret_subset = {result.secret_hd!r}")
    g = gallery_hd(corpus, trial, result)
    if g is not None:
        lines.append(f"gallery = {trial.gallery.key}")
        lines.append(f"hd_gallery = {g!r}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- sweeps


@dataclass
class TrialRecord:
    scenario: int
    epsilon: float
    trial: int
    seed: int
    sample: str
    target: str
    success: bool
    iterations: int
    dist: float
    hd: float
    gallery_hd: float | None


@dataclass
class SweepReport:
    epsilons: tuple[float, ...]
    caps: tuple[int, ...]
    scenarios: tuple[int, ...]
    trials: list[TrialRecord] = field(default_factory=list)

    def cell(self, scenario: int, epsilon: float) -> list[TrialRecord]:
        return [t for t in self.trials if t.scenario == scenario and t.epsilon == epsilon]

    def mean_iterations(self, scenario: int, epsilon: float) -> float | None:
        ok = [t.iterations for t in self.cell(scenario, epsilon) if t.success]
        return float(np.mean(ok)) if ok else None

    def mean_dist(self, scenario: int, epsilon: float) -> float | None:
        ok = [t.dist for t in self.cell(scenario, epsilon) if t.success]
        return float(np.mean(ok)) if ok else None

    def success_rate(self, scenario: int, epsilon: float, cap: int) -> float | None:
        """Percentage of trials that terminated within ``cap`` iterations.

        An attack's trajectory does not depend on its cap, so one run at
        the largest cap answers every smaller cap.
        """
        cell = self.cell(scenario, epsilon)
        if not cell:
            return None
        return 100.0 * sum(t.success and t.iterations <= cap for t in cell) / len(cell)


def _ci95(values) -> float:
    v = np.asarray(values, dtype=float)
    return float(1.96 * v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0


def _fmt(x) -> str:
    return "" if x is None else f"{x:.6g}"


def run_sweep(config: ExperimentConfig, corpus: LoadedCorpus, net, scenarios=None) -> SweepReport:
    """All (scenario, epsilon, trial) attacks at the largest cap.

    Trial ``t`` uses the same seed, benign sample and subset at every
    epsilon and scenario, so cells are paired.
    """
    scenarios = tuple(config.scenarios if scenarios is None else scenarios)
    _, test = corpus.split()
    pool = test or corpus.records
    cap = max(config.caps)
    report = SweepReport(config.epsilons, config.caps, scenarios)
    for scenario in scenarios:
        for t in range(config.trials):
            trial = trial_setup(corpus, pool, t, scenario, config.mode == "targeted", config.subset_size)
            for eps in config.epsilons:
                res = execute_trial(corpus, net, trial, attack_config(config, eps, scenario, trial.subset, cap))
                report.trials.append(TrialRecord(
                    scenario, eps, t, trial.seed, trial.benign.key,
                    trial.target.key if trial.target is not None else "",
                    res.success, res.iterations, res.dist, res.hd, gallery_hd(corpus, trial, res)))
            log.info("scenario %d trial %d done", scenario, t)
    return report


def write_sweep(report: SweepReport, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = ["epsilon"]
    for s in report.scenarios:
        header += [f"dist_s{s}", f"dist_ci95_s{s}", f"itr_s{s}", f"itr_ci95_s{s}", f"successes_s{s}", f"trials_s{s}"]
    rows = []
    for eps in report.epsilons:
        row = [_fmt(eps)]
        for s in report.scenarios:
            ok = [t for t in report.cell(s, eps) if t.success]
            row += [_fmt(report.mean_dist(s, eps)), _fmt(_ci95([t.dist for t in ok]) if ok else None),
                    _fmt(report.mean_iterations(s, eps)), _fmt(_ci95([t.iterations for t in ok]) if ok else None),
                    len(ok), len(report.cell(s, eps))]
        rows.append(row)
    paths = {"distances": out / "distances.csv", "success_rates": out / "success_rates.csv", "trials": out / "trials.csv"}
    io.write_csv(paths["distances"], [f"v{SCHEMA_VERSION}:{h}" if i == 0 else h for i, h in enumerate(header)], rows)

    s3 = report.scenarios[0]
    io.write_csv(paths["success_rates"], [f"v{SCHEMA_VERSION}:epsilon"] + [f"cap_{c}" for c in report.caps],
                 [[_fmt(eps)] + [_fmt(report.success_rate(s3, eps, c)) for c in report.caps]
                  for eps in report.epsilons])
    io.write_csv(paths["trials"],
                 [f"v{SCHEMA_VERSION}:scenario", "epsilon", "trial", "seed", "sample", "target",
                  "success", "iterations", "dist", "hd", "gallery_hd"],
                 [(t.scenario, _fmt(t.epsilon), t.trial, t.seed, t.sample, t.target, int(t.success),
                   t.iterations, repr(t.dist), repr(t.hd), "" if t.gallery_hd is None else repr(t.gallery_hd))
                  for t in report.trials])
    return paths


def cmd_sweep(config: ExperimentConfig) -> SweepReport:
    corpus = read_corpus(config.corpus_dir)
    net = io.load_checkpoint(config.checkpoint_path)
    report = run_sweep(config, corpus, net)
    write_sweep(report, config.out_dir / "sweep")
    return report


# ---------------------------------------------------------------- encode / match


def cmd_encode(iris_path, mask_path, out_path, bank: FilterBank) -> IrisCode:
    sample = IrisSample(io.read_pgm(iris_path), io.read_pbm(mask_path))
    code = encode(sample, bank)
    io.write_pbm(out_path, code.bits)
    io.write_pbm(Path(out_path).with_suffix(".mask.pbm"), code.code_mask)
    return code


def cmd_match(code_a, code_b, threshold: float = 0.32):
    """Compare two stored codes (each a PBM with a sibling ``.mask.pbm``)."""
    def load(p):
        p = Path(p)
        mask_path = p.with_suffix(".mask.pbm")
        bits = io.read_pbm(p)
        mask = io.read_pbm(mask_path) if mask_path.exists() else np.ones_like(bits)
        return IrisCode(bits, mask, 1)

    hd, n = masked_hamming(load(code_a), load(code_b))
    return verify(hd, threshold, n)


__all__ = ["ExperimentConfig", "AttackFailed", "LoadedCorpus", "SweepReport", "TrainReport", "Trial",
           "TrialRecord", "cmd_attack", "cmd_encode", "cmd_gen_data", "cmd_match", "cmd_sweep", "cmd_train",
           "read_corpus", "run_sweep", "trial_setup", "write_corpus", "write_sweep", "pair_statistics",
           "EYES", "DEFAULT_EPSILONS", "DEFAULT_CAPS"]
