import json
import math

import numpy as np
import pytest

from rqtok.archive import (ArchiveError, decode_codebooks, encode_codebooks, header_size,
                           load_codebooks, save_codebooks)
from rqtok.cli import main
from rqtok.codebook_training import EmaState
from rqtok.config import PRESETS, ConfigError, RunConfig, parse_config, serialize_config
from rqtok.io import (IngestError, features_to_text, ingest_features, read_tokens, tokens_to_text,
                      write_features, write_tokens)
from rqtok.metrics import metrics_report
from rqtok.quantizer import ResidualQuantizer, quantize


def make_rq(M=4, K=16, D=8, seed=0, **kw):
    rng = np.random.default_rng(seed)
    return ResidualQuantizer.from_arrays([rng.normal(size=(K, D)) for _ in range(M)], **kw)


def make_ema(rq, seed=1):
    rng = np.random.default_rng(seed)
    return [EmaState(rng.random(cb.size), rng.normal(size=cb.vectors.shape), 0.99, 1e-5, step=7)
            for cb in rq.stages]


class TestConfig:
    def test_empty_gives_defaults(self, tmp_path):
        f = tmp_path / "c.yaml"
        f.write_text("")
        cfg = parse_config(f)
        assert cfg == RunConfig()
        assert (cfg.gamma, cfg.reset_threshold, cfg.mask_ratio) == (0.99, 1, 0.8)
        assert (cfg.alpha, cfg.tokenizer_update_every, cfg.iterations) == (0.5, 5, 2)

    def test_range_error_names_key(self):
        with pytest.raises(ConfigError) as exc:
            parse_config(text="gamma: 1.5")
        assert exc.value.key == "gamma"

    @pytest.mark.parametrize("text,key", [("epsilon: 0", "epsilon"), ("mask_ratio: 1.0", "mask_ratio"),
                                          ("iterations: 0", "iterations"), ("init_mode: random", "init_mode"),
                                          ("nonsense: 3", "nonsense"), ("preset: huge", "preset"),
                                          ("soft_k: 99", "soft_k")])
    def test_rejections(self, text, key):
        with pytest.raises(ConfigError) as exc:
            parse_config(text=text)
        assert exc.value.key == key

    def test_round_trip(self):
        cfg = RunConfig(gamma=0.95, epsilon=1e-6, tokenizer_update_every=None, normalization="per_stage")
        assert parse_config(text=serialize_config(cfg)) == cfg

    def test_scientific_notation(self):
        assert parse_config(text="epsilon: 1e-5").epsilon == 1e-5

    def test_presets(self):
        assert parse_config(text="preset: desk-vq").sizes == [64]
        full = parse_config(text="preset: full-rq")
        assert (full.num_codebooks, full.codebook_size, full.dim) == (4, 256, 256)
        assert sum(RunConfig(**PRESETS["full-vq"]).sizes) == sum(full.sizes)


class TestArchive:
    def test_payload_size(self):
        rq = make_rq()
        blob = encode_codebooks(rq)
        assert len(blob) - header_size(4) == 4 * 16 * 8 * 8 == 4096

    def test_round_trip_bit_exact(self, tmp_path):
        rq, ema = make_rq(M=3, K=5, D=2, normalization="per_stage"), None
        ema = make_ema(rq)
        p = tmp_path / "a.brqc"
        save_codebooks(rq, p, ema)
        rq2, ema2 = load_codebooks(p)
        for a, b in zip(rq.stages, rq2.stages):
            assert a.vectors.tobytes() == b.vectors.tobytes()
        for a, b in zip(ema, ema2):
            assert a.counts.tobytes() == b.counts.tobytes()
            assert a.embed_sum.tobytes() == b.embed_sum.tobytes()
            assert (a.gamma, a.eps, a.step) == (b.gamma, b.eps, b.step)
        assert rq2.normalization == "per_stage"
        p2 = tmp_path / "b.brqc"
        save_codebooks(rq2, p2, ema2)
        assert p.read_bytes() == p2.read_bytes()

    def test_without_ema(self, tmp_path):
        p = tmp_path / "a.brqc"
        save_codebooks(make_rq(M=1, K=3, D=2), p)
        assert load_codebooks(p)[1] is None

    def test_float32(self):
        rq = make_rq(M=2, K=4, D=3)
        blob = encode_codebooks(rq, width=4)
        rq2, _, width = decode_codebooks(blob)
        assert width == 4
        np.testing.assert_array_equal(rq2.stages[0].vectors, rq.stages[0].vectors.astype(np.float32))
        assert encode_codebooks(rq2, width=4) == blob

    def test_bad_magic(self):
        blob = bytearray(encode_codebooks(make_rq()))
        blob[:4] = b"XXXX"
        with pytest.raises(ArchiveError, match="magic"):
            decode_codebooks(bytes(blob))

    def test_bad_version(self):
        blob = bytearray(encode_codebooks(make_rq()))
        blob[4] = 99
        with pytest.raises(ArchiveError, match="version"):
            decode_codebooks(bytes(blob))

    def test_truncated(self):
        blob = encode_codebooks(make_rq(), make_ema(make_rq()))
        for cut in (3, header_size(4) - 1, len(blob) - 1):
            with pytest.raises(ArchiveError):
                decode_codebooks(blob[:cut])

    def test_trailing_bytes(self):
        with pytest.raises(ArchiveError):
            decode_codebooks(encode_codebooks(make_rq()) + b"\0")

    def test_no_temp_files_left(self, tmp_path):
        save_codebooks(make_rq(), tmp_path / "a.brqc")
        assert [p.name for p in tmp_path.iterdir()] == ["a.brqc"]


class TestIngest:
    def test_text_two_by_three(self, tmp_path):
        f = tmp_path / "x.csv"
        f.write_text("a,b,c\n1,2,3\n4,5,6\n")
        x = ingest_features(f)
        assert x.shape == (1, 2, 3)
        np.testing.assert_array_equal(x[0], [[1, 2, 3], [4, 5, 6]])

    def test_blank_line_samples(self, tmp_path):
        f = tmp_path / "x.txt"
        f.write_text("1 2\n3 4\n\n5 6\n7 8\n")
        assert ingest_features(f).shape == (2, 2, 2)

    def test_raw_matches_text(self, tmp_path):
        x = np.random.default_rng(0).normal(size=(3, 4, 5)).astype(np.float32).astype(np.float64)
        write_features(tmp_path / "x.bin", x, "raw")
        write_features(tmp_path / "x.txt", x, "text")
        a = ingest_features(tmp_path / "x.bin", "raw", T=4, F=5)
        b = ingest_features(tmp_path / "x.txt")
        assert a.tobytes() == b.tobytes() == x.tobytes()

    def test_raw_size_mismatch(self, tmp_path):
        (tmp_path / "x.bin").write_bytes(np.zeros(7, dtype="<f4").tobytes())
        with pytest.raises(IngestError):
            ingest_features(tmp_path / "x.bin", "raw", T=2, F=2)

    def test_nan_row_number(self, tmp_path):
        f = tmp_path / "x.csv"
        f.write_text("h1,h2\n1,2\n3,nan\n")
        with pytest.raises(IngestError) as exc:
            ingest_features(f)
        assert exc.value.row == 3

    def test_ragged(self, tmp_path):
        f = tmp_path / "x.csv"
        f.write_text("1,2\n3\n")
        with pytest.raises(IngestError, match="ragged"):
            ingest_features(f)

    def test_text_exact_round_trip(self):
        x = np.random.default_rng(1).normal(size=(2, 3, 2))
        from rqtok.io import _parse_blocks
        blocks = _parse_blocks(features_to_text(x), float, True)
        assert np.array([[r for _, r in b] for b in blocks]).tobytes() == x.tobytes()

    def test_tokens_round_trip(self, tmp_path):
        t = np.random.default_rng(2).integers(16, size=(3, 5, 4))
        write_tokens(tmp_path / "t.txt", t)
        np.testing.assert_array_equal(read_tokens(tmp_path / "t.txt"), t)
        assert tokens_to_text(t[0]).count("\n") == 5


def run_cli(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


class TestCli:
    def test_convergence_check(self, capsys):
        code, out, _ = run_cli(capsys, "convergence-check", "--gamma", 0.99, "--eps", 1e-5, "--steps", 5000)
        assert code == 0
        rep = json.loads(out)
        assert rep["max_code_deviation"] < 1e-8 and rep["max_count_deviation"] < 1e-8

    def test_usage_errors(self, capsys):
        for argv in ([], ["frobnicate"], ["quantize", "--codebooks", "x"]):
            code, _, err = run_cli(capsys, *argv)
            assert code == 1
            assert json.loads(err.strip())["error"] == "usage"
            assert err.count("\n") == 1

    def test_validation_error(self, capsys, tmp_path):
        cfg = tmp_path / "c.yaml"
        cfg.write_text("gamma: 2\n")
        code, _, err = run_cli(capsys, "train", "--config", cfg)
        assert code == 2
        msg = json.loads(err)
        assert msg["error"] == "validation" and msg["key"] == "gamma"

    def test_divergence_exit_code(self, capsys, tmp_path):
        cfg = tmp_path / "c.yaml"
        cfg.write_text("encoder_lr: 1.0e6\nencoder_epochs: 20\niterations: 1\nn_samples: 64\n")
        with np.errstate(all="ignore"):
            code, _, err = run_cli(capsys, "train", "--config", cfg)
        assert code == 3
        assert json.loads(err)["error"] == "divergence"

    def test_uniform_grid_metrics(self, capsys, tmp_path):
        save_codebooks(make_rq(M=2, K=4, D=3), tmp_path / "cb.brqc")
        grid = np.stack([np.arange(8) % 4, (np.arange(8) * 3) % 4], axis=1)
        write_tokens(tmp_path / "t.txt", grid)
        code, out, _ = run_cli(capsys, "metrics", "--tokens", tmp_path / "t.txt", "--codebooks", tmp_path / "cb.brqc")
        assert code == 0
        assert [s["ecu"] for s in json.loads(out)["stages"]] == [1.0, 1.0]

    def test_quantize_then_metrics_matches_in_process(self, capsys, tmp_path):
        rq = make_rq(M=2, K=8, D=4, normalization="none")
        save_codebooks(rq, tmp_path / "cb.brqc")
        x = np.random.default_rng(3).normal(size=(5, 6, 4))
        write_features(tmp_path / "x.txt", x)
        code, _, _ = run_cli(capsys, "quantize", "--codebooks", tmp_path / "cb.brqc",
                             "--input", tmp_path / "x.txt", "--out", tmp_path / "t.txt")
        assert code == 0
        tokens = quantize(x.reshape(-1, 4), rq).tokens
        np.testing.assert_array_equal(read_tokens(tmp_path / "t.txt").reshape(-1, 2), tokens)
        code, out, _ = run_cli(capsys, "metrics", "--tokens", tmp_path / "t.txt",
                               "--codebooks", tmp_path / "cb.brqc")
        assert json.loads(out) == json.loads(json.dumps(metrics_report(tokens, rq.sizes)))

    def test_gen_data_and_env_overrides(self, capsys, tmp_path, monkeypatch):
        monkeypatch.setenv("RQTOK_OUTPUT_DIR", str(tmp_path))
        monkeypatch.setenv("RQTOK_SEED", "4")
        assert run_cli(capsys, "gen-data", "--n-samples", 3, "--out", "a.txt")[0] == 0
        assert run_cli(capsys, "gen-data", "--n-samples", 3, "--out", "b.txt", "--seed", 4)[0] == 0
        assert run_cli(capsys, "gen-data", "--n-samples", 3, "--out", "c.txt", "--seed", 5)[0] == 0
        a, b, c = ((tmp_path / n).read_text() for n in ("a.txt", "b.txt", "c.txt"))
        assert a == b != c
        assert ingest_features(tmp_path / "a.txt").shape == (3, 32, 16)

    def test_train_reproducible_with_archive(self, capsys, tmp_path):
        cfg = tmp_path / "c.yaml"
        cfg.write_text("n_samples: 32\neval_samples: 16\nseq_len: 8\nencoder_epochs: 2\ntokenizer_epochs: 1\n")
        outs = []
        for tag in ("a", "b"):
            code, out, _ = run_cli(capsys, "train", "--config", cfg, "--seed", 3,
                                   "--out", tmp_path / f"{tag}.json", "--codebooks", tmp_path / f"{tag}.brqc")
            assert code == 0
            outs.append(out)
        assert outs[0] == outs[1]
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
        assert (tmp_path / "a.brqc").read_bytes() == (tmp_path / "b.brqc").read_bytes()
        rep = json.loads(outs[0])
        assert rep["seed"] == 3 and rep["phase_sequence"] == ["E", "T", "E"]
        assert load_codebooks(tmp_path / "a.brqc")[1] is not None

    def test_compare(self, capsys):
        code, out, _ = run_cli(capsys, "compare-vq-rq", "--seeds", 1)
        assert code == 0
        rep = json.loads(out)
        assert rep["rq_shape"] == [4, 16] and len(rep["runs"]) == 1
        assert math.isfinite(rep["runs"][0]["vq"]["quantization_mse"])
