import csv

import numpy as np
import pytest

import srnn.model
from srnn import checkpoint as ckpt
from srnn import numerics as nx
from srnn.cli import ConfigError, RunConfig, cmd_gradcheck, load_data, main, parse_config
from srnn.data import save_cifar10_binary, Dataset
from srnn.model import BaseCnnConfig, ScaleClassifier
from srnn.train import evaluate

TINY = """\
# tiny synthetic run
head = {head}
scales = 16x16, 32x32, 64x64
channels = 4, 8
train_per_class = 2
val_per_class = 2
pretrain_epochs = 1
epochs = {epochs}
decay_every = 2
batch_size = 8
lr0 = 0.01
seed = {seed}
out_dir = {out}
"""


def write_config(tmp_path, name="run.cfg", head="srnn_halfgru", epochs=2, seed=0, out="out", extra=""):
    path = tmp_path / name
    path.write_text(TINY.format(head=head, epochs=epochs, seed=seed, out=tmp_path / out) + extra)
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestConfig:
    def test_defaults(self):
        cfg = parse_config("")
        assert cfg == RunConfig()
        assert cfg.scales == ((16, 16), (32, 32), (64, 64))

    def test_values_and_comments(self):
        cfg = parse_config("head = srnn_vanilla  # comment\nscales = 8x8,16×16\nnesterov = off\nlr0=0.5\n")
        assert (cfg.head, cfg.scales, cfg.nesterov, cfg.lr0) == ("srnn_vanilla", ((8, 8), (16, 16)), False, 0.5)

    def test_typo_names_key_and_line(self):
        with pytest.raises(ConfigError, match="line 2.*momentom"):
            parse_config("lr0 = 0.1\nmomentom = 0.9\n")

    @pytest.mark.parametrize("text", ["epochs = many", "head = resnet", "momentum = 1.5", "scales = 32x32,16x16",
                                      "just a line", "dataset = imagenet"])
    def test_bad_values(self, text):
        with pytest.raises(ConfigError):
            parse_config(text)

    def test_typo_exit_code(self, tmp_path, capsys):
        path = tmp_path / "bad.cfg"
        path.write_text("momentom = 0.9\n")
        assert main(["train", str(path)]) == 2
        assert "momentom" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path):
        assert main(["train", str(tmp_path / "nope.cfg")]) == 2


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("run")
    cfg = write_config(tmp)
    assert main(["train", str(cfg)]) == 0
    return tmp, cfg


class TestTrain:
    def test_outputs(self, trained):
        tmp, _ = trained
        rows = read_csv(tmp / "out" / "metrics.csv")
        assert rows[0] == ["epoch", "lr", "train_loss", "val_top1", "val_top5"]
        assert len(rows) - 1 == 2
        assert [float(r[1]) for r in rows[1:]] == [0.01, 0.01]
        assert len(read_csv(tmp / "out" / "pretrain_metrics.csv")) == 2
        state = ckpt.load(tmp / "out" / "model.srnn")
        assert ckpt.infer_head(state) == "srnn_halfgru" and "base.fc.weight" in state

    def test_byte_identical_rerun(self, trained, tmp_path):
        tmp, _ = trained
        cfg = write_config(tmp_path)
        assert main(["train", str(cfg)]) == 0
        for name in ("metrics.csv", "model.srnn", "pretrained.srnn", "pretrain_metrics.csv"):
            assert (tmp_path / "out" / name).read_bytes() == (tmp / "out" / name).read_bytes()

    def test_pretrained_checkpoint_skips_pretraining(self, trained, tmp_path):
        tmp, _ = trained
        cfg = write_config(tmp_path, head="srnn_vanilla", epochs=1,
                           extra=f"pretrained = {tmp / 'out' / 'pretrained.srnn'}\n")
        assert main(["train", str(cfg)]) == 0
        assert not (tmp_path / "out" / "pretrain_metrics.csv").exists()
        assert ckpt.infer_head(ckpt.load(tmp_path / "out" / "model.srnn")) == "srnn_vanilla"

    @pytest.mark.parametrize("head", ["single", "ens_logit"])
    def test_non_recurrent_heads(self, tmp_path, head):
        cfg = write_config(tmp_path, head=head, epochs=1)
        assert main(["train", str(cfg)]) == 0
        assert ckpt.infer_head(ckpt.load(tmp_path / "out" / "model.srnn")) == "single"

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_exit_code(self, tmp_path, capsys):
        cfg = write_config(tmp_path, head="srnn_vanilla", extra="lr0 = 1e30\npretrain_lr0 = 1e30\n")
        assert main(["train", str(cfg)]) == 3
        assert "epoch 0" in capsys.readouterr().err

    def test_cifar_dataset(self, tmp_path):
        rng = np.random.default_rng(0)
        ds = Dataset(rng.integers(0, 256, (20, 3, 32, 32)) / 255.0, np.arange(20) % 10, 10)
        save_cifar10_binary(ds, tmp_path / "train.bin")
        cfg = tmp_path / "c.cfg"
        cfg.write_text(f"dataset = cifar10\ndata_path = {tmp_path / 'train.bin'}\nscales = 16x16, 32x32\n"
                       f"channels = 4\nepochs = 1\npretrain_epochs = 1\nout_dir = {tmp_path / 'out'}\n")
        train, val = load_data(parse_config(cfg.read_text()))
        assert (len(train), len(val)) == (18, 2)
        assert main(["train", str(cfg)]) == 0

    def test_corrupt_cifar_is_config_error(self, tmp_path):
        (tmp_path / "bad.bin").write_bytes(b"\x00" * 3072)
        cfg = tmp_path / "c.cfg"
        cfg.write_text(f"dataset = cifar10\ndata_path = {tmp_path / 'bad.bin'}\n")
        assert main(["train", str(cfg)]) == 2


class TestEval:
    def test_table(self, trained, capsys):
        tmp, cfg = trained
        model = tmp / "out" / "model.srnn"
        assert main(["eval", str(model), str(cfg)]) == 0
        rows = read_csv(tmp / "out" / "eval.csv")
        assert rows[0] == ["head", "top1", "top5"]
        assert [r[0] for r in rows[1:]] == ["single_16x16", "single_32x32", "single_64x64", "ens_prob",
                                            "ens_logit", "srnn_halfgru"]
        first = (tmp / "out" / "eval.csv").read_bytes()
        assert main(["eval", str(model), str(cfg)]) == 0
        assert (tmp / "out" / "eval.csv").read_bytes() == first
        assert "ens_logit" in capsys.readouterr().out

    def test_matches_library_evaluation(self, trained):
        tmp, cfg = trained
        assert main(["eval", str(tmp / "out" / "model.srnn"), str(cfg)]) == 0
        rows = {r[0]: (float(r[1]), float(r[2])) for r in read_csv(tmp / "out" / "eval.csv")[1:]}
        run = parse_config(cfg.read_text())
        _, val = load_data(run)
        state = ckpt.load(tmp / "out" / "model.srnn")
        model = ckpt.model_from_state(state, dtype=np.float64)
        base = ckpt.base_from_state(state, dtype=np.float64)
        top1, top5 = evaluate(model, val, run.scales, "srnn_halfgru")
        assert rows["srnn_halfgru"] == (round(top1, 6), round(top5, 6))
        assert rows["single_32x32"][0] == round(evaluate(base, val, [(32, 32)], "single")[0], 6)

    def test_untrained_model_at_chance(self, tmp_path):
        model = ScaleClassifier.init(BaseCnnConfig(channels=(4, 8)), 16, np.random.default_rng(3))
        ckpt.checkpoint_save(model, tmp_path / "rand.srnn")
        cfg = tmp_path / "e.cfg"
        cfg.write_text(f"head = single\nval_per_class = 63\ntrain_per_class = 1\nout_dir = {tmp_path}\n")
        assert main(["eval", str(tmp_path / "rand.srnn"), str(cfg)]) == 0
        rows = read_csv(tmp_path / "eval.csv")[1:]
        assert len(rows) == 5
        for _, top1, _ in rows:
            assert abs(float(top1) - 93.75) <= 5.0

    def test_two_checkpoints_fill_both_srnn_rows(self, trained, tmp_path):
        tmp, _ = trained
        cfg = write_config(tmp_path, head="srnn_vanilla", epochs=1,
                           extra=f"pretrained = {tmp / 'out' / 'pretrained.srnn'}\n")
        assert main(["train", str(cfg)]) == 0
        assert main(["eval", str(tmp_path / "out" / "model.srnn"), str(tmp / "out" / "model.srnn"), str(cfg)]) == 0
        heads = [r[0] for r in read_csv(tmp_path / "out" / "eval.csv")[1:]]
        assert heads[-2:] == ["srnn_vanilla", "srnn_halfgru"]

    def test_missing_tensors_exit_4(self, trained, tmp_path, capsys):
        tmp, cfg = trained
        state = ckpt.load(tmp / "out" / "pretrained.srnn")
        ckpt.save(state, tmp_path / "base_only.srnn")
        assert main(["eval", str(tmp_path / "base_only.srnn"), str(cfg)]) == 4
        assert "srnn.U" in capsys.readouterr().err
        del state["fc.weight"]
        ckpt.save(state, tmp_path / "broken.srnn")
        assert main(["eval", str(tmp_path / "broken.srnn"), str(cfg)]) == 4
        assert "fc.weight" in capsys.readouterr().err

    def test_corrupt_checkpoint_exit_4(self, trained, tmp_path):
        tmp, cfg = trained
        raw = bytearray((tmp / "out" / "model.srnn").read_bytes())
        raw[40] ^= 0xFF
        (tmp_path / "c.srnn").write_bytes(bytes(raw))
        assert main(["eval", str(tmp_path / "c.srnn"), str(cfg)]) == 4


class TestBench:
    def test_table_and_full_prefix_identity(self, trained):
        tmp, cfg = trained
        model = tmp / "out" / "model.srnn"
        assert main(["bench", str(model), str(cfg)]) == 0
        rows = read_csv(tmp / "out" / "bench.csv")
        assert rows[0] == ["scales_used", "top1", "mac_count"]
        assert [int(r[0]) for r in rows[1:]] == [1, 2, 3]
        macs = [int(r[2]) for r in rows[1:]]
        assert all(b > a for a, b in zip(macs, macs[1:]))
        assert main(["eval", str(model), str(cfg)]) == 0
        srnn_row = [r for r in read_csv(tmp / "out" / "eval.csv") if r[0] == "srnn_halfgru"][0]
        assert rows[-1][1] == srnn_row[1]

    def test_vanilla_config_on_gru_checkpoint(self, trained, tmp_path):
        tmp, _ = trained
        cfg = write_config(tmp_path, head="srnn_vanilla")
        assert main(["bench", str(tmp / "out" / "model.srnn"), str(cfg)]) == 4


class TestGradcheck:
    @pytest.mark.parametrize("seed", range(5))
    def test_passes(self, seed, capsys):
        assert main(["gradcheck", "--seed", str(seed)]) == 0
        assert "worst" in capsys.readouterr().out

    def test_fault_injection_names_u(self, monkeypatch, capsys):
        def bad_transition(h, U):
            h, U = nx.as_tensor(h), nx.as_tensor(U)

            def backward(g):
                return g @ U.data, 2.0 * (g.T @ h.data)  # deliberately doubled dL/dU
            return nx._make(h.data @ U.data.T, (h, U), backward)

        monkeypatch.setattr(srnn.model, "transition", bad_transition)
        assert cmd_gradcheck(0) == 5
        out = capsys.readouterr().out
        assert "FAIL" in out and "srnn.U" in out
        assert all("srnn.U" in line for line in out.splitlines() if line.startswith("FAIL"))
