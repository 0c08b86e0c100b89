import json

import numpy as np
import pytest

from fedslice import cli
from fedslice.checkpoint import read_checkpoint, write_checkpoint
from fedslice.config import parse_run_config
from fedslice.errors import ConfigError, FormatError
from fedslice.nn import ModelConfig, init_weights


def run_config_doc(**overrides):
    doc = {
        "model": {"n_layers": 1, "d_model": 8, "n_heads": 2, "d_k": 2, "d_v": 2,
                  "d_ff": 8, "vocab_size": 4, "n_classes": 4, "max_seq": 8},
        "federation": {"n_clients": 4, "participation_rate": 0.5, "rounds": 2,
                       "ratio_set": [0.5, 1.0], "master_seed": 5, "eval_every": 1},
        "task": {"kind": "majority-token", "vocab_size": 4, "seq_len": 5,
                 "n_classes": 4, "n_samples": 120, "seed": 3},
        "partition": {"dirichlet_alpha": 1.0, "seed": 4},
        "clients": {"local_epochs": 1, "lr": 0.2, "batch_size": 16,
                    "budget_fractions": [1.0], "eval_fraction": 0.2},
    }
    doc.update(overrides)
    return doc


def write_config(tmp_path, doc, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


class TestCheckpoint:
    def test_roundtrip_2x3(self, tmp_path):
        path = tmp_path / "t.rffm"
        arr = np.arange(1.0, 7.0).reshape(2, 3)
        write_checkpoint(path, {"weights": arr})
        back = read_checkpoint(path)
        assert list(back) == ["weights"]
        assert np.array_equal(back["weights"], arr)

    def test_roundtrip_model_bit_exact(self, tmp_path):
        w = init_weights(ModelConfig(1, 6, 2, 3, 3, 8, 11, 3, 8), 7)
        path = tmp_path / "m.rffm"
        write_checkpoint(path, cli.model_to_tensors(w))
        back = cli.tensors_to_model(read_checkpoint(path))
        assert back.config == w.config
        assert all(np.array_equal(w.tensors[k], back.tensors[k]) for k in w.tensors)

    def test_empty_map_roundtrips(self, tmp_path):
        path = tmp_path / "e.rffm"
        write_checkpoint(path, {})
        assert read_checkpoint(path) == {}

    def test_flipped_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.rffm"
        write_checkpoint(path, {"a": np.zeros((1, 1))})
        blob = bytearray(path.read_bytes())
        blob[0] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="magic"):
            read_checkpoint(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        path = tmp_path / "t.rffm"
        write_checkpoint(path, {"a": np.zeros((2, 2))})
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(FormatError, match="trailing"):
            read_checkpoint(path)

    def test_truncation_rejected_with_offset(self, tmp_path):
        path = tmp_path / "t.rffm"
        write_checkpoint(path, {"a": np.ones((4, 4))})
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(FormatError, match="offset"):
            read_checkpoint(path)

    def test_nan_payload_rejected(self, tmp_path):
        path = tmp_path / "t.rffm"
        arr = np.zeros((2, 2))
        arr[0, 0] = np.nan
        blob = bytearray()
        blob += b"RFFM"
        import struct
        blob += struct.pack("<II", 1, 1)
        blob += struct.pack("<I", 1) + b"a" + struct.pack("<I", 2)
        blob += struct.pack("<QQ", 2, 2) + arr.astype("<f8").tobytes()
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="non-finite"):
            read_checkpoint(path)


class TestRunConfig:
    def test_unknown_key_rejected(self):
        doc = run_config_doc()
        doc["model"]["d_modle"] = 8
        with pytest.raises(ConfigError, match="d_modle"):
            parse_run_config(json.dumps(doc))

    def test_unknown_top_level_key_rejected(self):
        doc = run_config_doc()
        doc["extras"] = {}
        with pytest.raises(ConfigError, match="extras"):
            parse_run_config(json.dumps(doc))

    def test_invalid_json_reports_line(self):
        with pytest.raises(ConfigError, match="line 2"):
            parse_run_config('{\n "model": }')

    def test_seed_override(self):
        cfg = parse_run_config(json.dumps(run_config_doc()), seed_override=99)
        assert cfg.federation.master_seed == 99


class TestCmdRun:
    def test_zero_rounds(self, tmp_path):
        doc = run_config_doc()
        doc["federation"]["rounds"] = 0
        cfg_path = write_config(tmp_path, doc)
        out = tmp_path / "out"
        assert cli.main(["run", cfg_path, "--out", str(out)]) == 0
        assert json.loads((out / "summary.json").read_text())["rounds"] == 0
        assert (out / "metrics.jsonl").read_text() == ""

    def test_run_writes_outputs(self, tmp_path):
        cfg_path = write_config(tmp_path, run_config_doc())
        out = tmp_path / "out"
        assert cli.main(["run", cfg_path, "--out", str(out)]) == 0
        lines = (out / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 2
        for line in lines:
            rec = json.loads(line)
            assert {"round", "participants", "bytes_down", "bytes_up"} <= set(rec)
        summary = json.loads((out / "summary.json").read_text())
        assert summary["final_accuracy"] is not None
        assert read_checkpoint(out / "final_weights.rffm")

    def test_same_seed_byte_identical_summary(self, tmp_path):
        cfg_path = write_config(tmp_path, run_config_doc())
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert cli.main(["run", cfg_path, "--out", str(out1)]) == 0
        assert cli.main(["run", cfg_path, "--out", str(out2)]) == 0
        assert (out1 / "summary.json").read_bytes() == (out2 / "summary.json").read_bytes()

    def test_invalid_config_exits_1(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text("{ not json }")
        assert cli.main(["run", str(path)]) == 1
        assert "line" in capsys.readouterr().err

    def test_missing_file_exits_3(self, tmp_path):
        assert cli.main(["run", str(tmp_path / "nope.json")]) == 3


class TestCmdVerify:
    def test_single_trial(self, capsys):
        assert cli.main(["verify", "--trials", "1"]) == 0
        out = capsys.readouterr().out
        assert "theorem invariance" in out

    def test_default_tolerances_pass(self):
        assert cli.main(["verify", "--trials", "20"]) == 0

    def test_negative_control_fails(self):
        assert cli.main(["verify", "--trials", "5", "--negative-control"]) == 2


class TestCmdExtractInspect:
    def test_extract_roundtrip_and_counts(self, tmp_path, capsys):
        cfg = ModelConfig(1, 8, 2, 4, 4, 16, 11, 3, 10)
        w = init_weights(cfg, 2)
        ckpt_in = tmp_path / "in.rffm"
        write_checkpoint(ckpt_in, cli.model_to_tensors(w))
        spec_path = tmp_path / "spec.json"
        spec_path.write_text(json.dumps({"ratio": 0.5}))
        ckpt_out = tmp_path / "out.rffm"
        assert cli.main(["extract", str(ckpt_in), str(spec_path), str(ckpt_out)]) == 0
        out = capsys.readouterr().out
        assert f"params before: {w.param_total()}" in out
        sub = cli.tensors_to_model(read_checkpoint(ckpt_out))
        assert sub.param_total() < w.param_total()
        assert f"params after:  {sub.param_total()}" in out

    def test_full_ratio_extract_preserves_values(self, tmp_path):
        cfg = ModelConfig(1, 6, 2, 3, 3, 8, 11, 3, 8)
        w = init_weights(cfg, 4)
        ckpt_in = tmp_path / "in.rffm"
        write_checkpoint(ckpt_in, cli.model_to_tensors(w))
        spec_path = tmp_path / "spec.json"
        spec_path.write_text(json.dumps({"ratio": 1.0}))
        ckpt_out = tmp_path / "out.rffm"
        assert cli.main(["extract", str(ckpt_in), str(spec_path), str(ckpt_out)]) == 0
        sub = cli.tensors_to_model(read_checkpoint(ckpt_out))
        from fedslice.scaling import prioritize_model
        wp, _ = prioritize_model(w)
        assert all(np.array_equal(wp.tensors[k], sub.tensors[k]) for k in wp.tensors)

    def test_incompatible_spec_exits_1(self, tmp_path):
        cfg = ModelConfig(1, 6, 2, 3, 3, 8, 11, 3, 8)
        ckpt_in = tmp_path / "in.rffm"
        write_checkpoint(ckpt_in, cli.model_to_tensors(init_weights(cfg, 1)))
        spec_path = tmp_path / "spec.json"
        spec_path.write_text(json.dumps({"ffn_widths": [99], "qk_widths": [[3, 3]],
                                         "v_widths": [[3, 3]]}))
        assert cli.main(["extract", str(ckpt_in), str(spec_path),
                         str(tmp_path / "o.rffm")]) == 1

    def test_inspect_manifest(self, tmp_path, capsys):
        path = tmp_path / "t.rffm"
        write_checkpoint(path, {"a": np.zeros((2, 3)), "b": np.zeros(4)})
        assert cli.main(["inspect", str(path)]) == 0
        out = capsys.readouterr().out
        assert "a  shape=[2, 3]" in out
        assert "total: 2 tensors, 10 values" in out
