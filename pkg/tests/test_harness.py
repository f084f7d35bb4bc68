from dataclasses import replace

import numpy as np
import pytest

from irisadv import io
from irisadv.cli import run
from irisadv.harness import (
    DEFAULT_EPSILONS,
    DEFAULT_CAPS,
    AttackFailed,
    ExperimentConfig,
    cmd_attack,
    cmd_encode,
    cmd_gen_data,
    cmd_match,
    cmd_sweep,
    cmd_train,
    read_corpus,
)


@pytest.fixture(scope="module")
def small(tmp_path_factory):
    """Ten-identity corpus with a one-epoch surrogate: enough to exercise the plumbing."""
    cfg = ExperimentConfig(out=str(tmp_path_factory.mktemp("small")), identities=10, samples=3,
                           master_seed=5, epochs=1)
    cmd_gen_data(cfg)
    cmd_train(cfg)
    return cfg


class TestConfig:
    def test_default_sweep_grids(self):
        cfg = ExperimentConfig()
        assert cfg.epsilons == DEFAULT_EPSILONS and len(DEFAULT_EPSILONS) == 11
        assert cfg.caps == DEFAULT_CAPS == (10, 20, 30, 40, 50, 100, 200, 300)

    def test_file_parsing_with_comments_and_overrides(self, tmp_path):
        p = tmp_path / "exp.cfg"
        p.write_text("# experiment\nprofile = desk\nmaster_seed = 7  # seed\n"
                     "epsilons = 0.03, 0.01\ncaps = 10,50\n\ntrials = 4\n")
        cfg = ExperimentConfig.from_file(p, trials=9)
        assert cfg.master_seed == 7 and cfg.epsilons == (0.03, 0.01) and cfg.caps == (10, 50)
        assert cfg.trials == 9

    @pytest.mark.parametrize("line", ["nonsense", "colour = red", "trials = many"])
    def test_bad_lines_name_the_line(self, tmp_path, line):
        p = tmp_path / "exp.cfg"
        p.write_text(f"profile = desk\n{line}\n")
        with pytest.raises(io.FormatError, match="line 2"):
            ExperimentConfig.from_file(p)

    @pytest.mark.parametrize("kw", [dict(epsilons=(0.01, 0.03)), dict(caps=(50, 10)), dict(profile="huge"),
                                    dict(scenarios=(4,)), dict(mode="sideways"), dict(trials=0)])
    def test_invalid_values_rejected(self, kw):
        with pytest.raises(ValueError):
            ExperimentConfig(**kw)

    def test_derived_paths(self, tmp_path):
        cfg = ExperimentConfig(out=str(tmp_path))
        assert cfg.corpus_dir == tmp_path / "corpus"
        assert cfg.checkpoint_path == tmp_path / "surrogate.irsg"
        assert cfg.extents == (16, 128) and ExperimentConfig(profile="full").extents == (64, 512)


class TestCorpusOnDisk:
    def test_reload_reproduces_codes(self, small):
        a, b = read_corpus(small.corpus_dir), read_corpus(small.corpus_dir)
        assert len(a.records) == 60 and a.master_seed == 5
        for x, y in zip(a.records, b.records):
            np.testing.assert_array_equal(x.code.bits, y.code.bits)

    def test_unknown_id_is_named(self, small):
        with pytest.raises(KeyError, match="0099R04"):
            read_corpus(small.corpus_dir).get("0099R04")

    def test_gen_data_is_byte_identical(self, tmp_path):
        outs = []
        for run_dir in ("a", "b"):
            cfg = ExperimentConfig(out=str(tmp_path / run_dir), identities=4, samples=2, master_seed=3)
            cmd_gen_data(cfg)
            outs.append({p.relative_to(cfg.corpus_dir): p.read_bytes()
                         for p in sorted(cfg.corpus_dir.rglob("*")) if p.is_file()})
        assert outs[0] == outs[1]

    def test_training_rejects_extent_mismatch(self, small, tmp_path):
        cfg = ExperimentConfig(profile="full", out=str(tmp_path), corpus=str(small.corpus_dir), epochs=1)
        with pytest.raises(ValueError, match="extents"):
            cmd_train(cfg)


class TestAttackCommand:
    def test_outputs_written_even_on_failure(self, small):
        with pytest.raises(AttackFailed):
            cmd_attack(small, "0009L00", 1e-4, cap=1)
        out = small.out_dir / "attack"
        for name in ("adversarial_iris.pgm", "adversarial_mask.pbm", "adversarial_code.pbm",
                     "trace.csv", "report.txt"):
            assert (out / name).exists()
        report = (out / "report.txt").read_text()
        assert "success = False" in report and "sample = 0009L00" in report

    @pytest.fixture
    def trained(self, desk_run, tmp_path):
        c = desk_run.config
        return ExperimentConfig(out=str(tmp_path), corpus=str(c.corpus_dir), checkpoint=str(c.checkpoint_path),
                                master_seed=c.master_seed)

    def test_report_is_recomputed(self, trained):
        _, test = read_corpus(trained.corpus_dir).split()
        res = cmd_attack(trained, test[0].key, 0.03, cap=300)
        assert res.success
        lines = (trained.out_dir / "attack/report.txt").read_text().splitlines()
        report = dict(line.split(" = ", 1) for line in lines)
        assert report["reverified"] == "True" and float(report["hd_reference"]) > 0.32
        assert report["verify_at_0.32"] == "reject"
        header, rows = io.read_csv(trained.out_dir / "attack/trace.csv")
        assert header[0] == "n" and len(rows) == res.iterations

    def test_targeted_replay(self, trained):
        corpus = read_corpus(trained.corpus_dir)
        _, test = corpus.split()
        benign = test[0]
        target = next(r for r in test if r.identity != benign.identity and r.eye == benign.eye)
        cfg = replace(trained, mode="targeted")
        res = cmd_attack(cfg, benign.key, 0.03, target=target.key, cap=300)
        report = (trained.out_dir / "attack/report.txt").read_text()
        assert f"reference = {target.key}" in report and "verify_at_0.32 = accept" in report
        assert res.success and res.hd < 0.32

    def test_unknown_target_rejected(self, small):
        with pytest.raises(KeyError, match="0000X00"):
            cmd_attack(small, "0009L00", 0.03, target="0000X00")


@pytest.fixture(scope="module")
def sweep(small, tmp_path_factory):
    cfg = ExperimentConfig(out=str(tmp_path_factory.mktemp("sweep")), corpus=str(small.corpus_dir),
                           checkpoint=str(small.checkpoint_path), master_seed=5,
                           epsilons=(0.03, 0.01), caps=(5, 50), trials=3)
    return cfg, cmd_sweep(cfg)


class TestSweep:
    def test_counts(self, sweep):
        _, rep = sweep
        assert len(rep.trials) == 3 * 2 * 3

    def test_pairing_across_cells(self, sweep):
        _, rep = sweep
        for t in range(3):
            cells = [r for r in rep.trials if r.trial == t and r.scenario != 2]
            assert len({r.sample for r in cells}) == 1

    def test_csv_schema(self, sweep):
        cfg, _ = sweep
        header, rows = io.read_csv(cfg.out_dir / "sweep/distances.csv")
        assert header[0] == "v1:epsilon" and "dist_s3" in header and "itr_ci95_s1" in header
        assert [r[0] for r in rows] == ["0.03", "0.01"]
        header, rows = io.read_csv(cfg.out_dir / "sweep/success_rates.csv")
        assert header == ["v1:epsilon", "cap_5", "cap_50"]
        for row in rows:
            rates = [float(x) for x in row[1:]]
            assert rates == sorted(rates)
        header, rows = io.read_csv(cfg.out_dir / "sweep/trials.csv")
        assert header[0] == "v1:scenario" and len(rows) == 18

    def test_success_rate_counts_termination_within_cap(self, sweep):
        _, rep = sweep
        cell = rep.cell(1, 0.01)
        expect = 100 * sum(r.success and r.iterations <= 5 for r in cell) / len(cell)
        assert rep.success_rate(1, 0.01, 5) == expect


class TestEncodeMatch:
    def test_same_image_matches_exactly(self, small, tmp_path):
        rec = read_corpus(small.corpus_dir).records[0]
        iris, mask = tmp_path / "i.pgm", tmp_path / "m.pbm"
        io.write_pgm(iris, rec.sample.iris)
        io.write_pbm(mask, rec.sample.mask)
        code = cmd_encode(iris, mask, tmp_path / "c.pbm", small.filter_bank())
        np.testing.assert_array_equal(code.bits, rec.code.bits)
        cmd_encode(iris, mask, tmp_path / "d.pbm", small.filter_bank())
        d = cmd_match(tmp_path / "c.pbm", tmp_path / "d.pbm")
        assert d.hd == 0.0 and d.accepted and d.compared_bits == int(code.code_mask.sum())


class TestCli:
    def test_full_flow(self, tmp_path, capsys):
        out = str(tmp_path / "deep" / "run")  # missing parents are created
        assert run(["gen-data", "--out", out, "--identities", "6", "--samples", "2", "--master-seed", "1"]) == 0
        assert run(["train", "--out", out, "--epochs", "1", "--master-seed", "1"]) == 0
        assert "bit error" in capsys.readouterr().out
        # a one-epoch surrogate may or may not get there; both outcomes write the images
        assert run(["attack", "--out", out, "--master-seed", "1", "--sample", "0005L00", "--cap", "20"]) in (0, 2)
        assert run(["encode", f"{out}/attack/adversarial_iris.pgm", f"{out}/attack/adversarial_mask.pbm",
                    str(tmp_path / "adv.pbm"), "--bank", f"{out}/corpus/filterbank.txt"]) == 0
        assert run(["encode", f"{out}/corpus/images/0005L00_iris.pgm", f"{out}/corpus/images/0005L00_mask.pbm",
                    str(tmp_path / "ben.pbm"), "--bank", f"{out}/corpus/filterbank.txt"]) == 0
        capsys.readouterr()
        assert run(["match", str(tmp_path / "ben.pbm"), str(tmp_path / "ben.pbm")]) == 0
        out = capsys.readouterr().out
        assert "hd 0.000000" in out and "accept" in out
        assert run(["match", str(tmp_path / "adv.pbm"), str(tmp_path / "ben.pbm")]) in (0, 4)

    def test_config_file_with_flag_override(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text(f"out = {tmp_path / 'r'}\nidentities = 4\nsamples = 2\nmaster_seed = 3\n")
        assert run(["gen-data", "--config", str(cfg), "--identities", "5"]) == 0
        assert len(read_corpus(tmp_path / "r" / "corpus").records) == 20

    def test_exit_2_on_attack_failure(self, small, capsys):
        code = run(["attack", "--out", small.out, "--sample", "0009L00", "--epsilon", "0.0001", "--cap", "1"])
        assert code == 2 and "attack failed" in capsys.readouterr().err

    def test_exit_3_on_calibration_failure(self, tmp_path, capsys):
        code = run(["gen-data", "--out", str(tmp_path), "--identities", "10", "--samples", "3", "--noise", "0.9"])
        assert code == 3 and "calibration failed" in capsys.readouterr().err

    @pytest.mark.parametrize("argv", [
        ["attack", "--sample", "9999L00"],
        ["train", "--corpus", "/nonexistent/corpus"],
        ["match", "/nonexistent/a.pbm", "/nonexistent/b.pbm"],
        ["sweep", "--config", "/nonexistent/exp.cfg"],
    ])
    def test_exit_4_on_io_or_selector_errors(self, small, argv, capsys):
        if "--sample" in argv:
            argv = argv + ["--out", small.out]
        assert run(argv) == 4
        err = capsys.readouterr().err
        assert err.startswith("error:")
        if "--sample" in argv:
            assert "9999L00" in err

    def test_malformed_image_is_exit_4(self, tmp_path, capsys):
        (tmp_path / "bad.pbm").write_bytes(b"P4\n8 8\n\x00")
        (tmp_path / "ok.pbm").write_bytes(b"P4\n8 1\n\x00")
        assert run(["match", str(tmp_path / "bad.pbm"), str(tmp_path / "ok.pbm")]) == 4


class TestGalleryComparison:
    def test_uses_benign_mask(self, small):
        from irisadv.codec import IrisSample, encode
        from irisadv.harness import attack_config, execute_trial, gallery_hd, trial_setup
        from irisadv.matcher import masked_hamming

        corpus = read_corpus(small.corpus_dir)
        trial = trial_setup(corpus, corpus.records, 0, 1, False, 1024)
        res = execute_trial(corpus, io.load_checkpoint(small.checkpoint_path), trial,
                            attack_config(small, 0.03, 1, None, 5))
        adv = encode(IrisSample(res.iris, trial.benign.sample.mask), corpus.bank)
        assert gallery_hd(corpus, trial, res) == masked_hamming(adv, trial.gallery.code)[0]
