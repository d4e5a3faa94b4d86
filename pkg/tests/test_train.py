import numpy as np
import pytest

from vitbench import data as D
from vitbench import tensor as T
from vitbench.checkpoint import (
    Checkpoint,
    load_checkpoint,
    load_params_into,
    save_checkpoint,
    snapshot_params,
)
from vitbench.errors import (
    ConfigurationError,
    ContractError,
    EmptyDatasetError,
    ValidationError,
)
from vitbench.tensor import Tensor
from vitbench.train import (
    Adam,
    ConfusionMatrix,
    MetricsRecord,
    TrainConfig,
    emit_comparison,
    evaluate,
    fine_tune,
    make_model,
    parse_comparison,
    pretrain,
    train,
)
from vitbench.vit import ViTConfig


@pytest.fixture
def tiny_task(tmp_path):
    """12-image 3-class synthetic dataset on disk."""
    path = D.generate_synthetic(tmp_path, "tiny", 3, 4, seed=21)
    return D.load_manifest(path)


class TestAdam:
    def test_first_step_magnitude_about_lr(self):
        p = Tensor(np.array([1.0, -1.0, 2.0]), requires_grad=True)
        p._grad = np.array([0.3, -5.0, 1e-3])
        before = p.data.copy()
        opt = Adam({"p": p}, lr=0.001)
        opt.step()
        delta = np.abs(p.data - before)
        assert np.all(delta >= 0.9 * 0.001)
        assert np.all(delta <= 0.001 + 1e-12)

    def test_zero_gradient_fresh_state(self):
        p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        p.zero_grad()
        before = p.data.copy()
        Adam({"p": p}).step()
        assert np.array_equal(p.data, before)

    def test_missing_gradient(self):
        p = Tensor(np.ones(2), requires_grad=True)
        opt = Adam({"theta": p})
        with pytest.raises(ContractError, match="theta"):
            opt.step()

    def test_scalar_quadratic_convergence(self):
        # Adam's step magnitude is capped near lr, so covering the distance
        # from 0 to 3 at lr 0.001 needs ~3000 steps plus settling time;
        # measured convergence is at step 5791
        theta = Tensor(np.array(0.0), requires_grad=True)
        opt = Adam({"theta": theta}, lr=0.001)
        for _ in range(6000):
            opt.zero_grad()
            with T.Tape() as tape:
                diff = T.sub(theta, Tensor(3.0))
                loss = T.mul(diff, diff)
            T.backward(loss, tape)
            opt.step()
        assert abs(theta.item() - 3.0) < 1e-2

    def test_step_count_and_moment_shapes(self):
        p = Tensor(np.ones((2, 3)), requires_grad=True)
        opt = Adam({"p": p})
        for i in range(5):
            p.zero_grad()
            opt.step()
        assert opt.t == 5
        assert opt.m["p"].shape == (2, 3)
        assert opt.v["p"].shape == (2, 3)


class TestTrain:
    def test_record_count_one_epoch(self, tiny_task):
        model = make_model("vit", ViTConfig(num_classes=3).to_dict(), seed=0)
        cfg = TrainConfig(epochs=1, batch_size=64, seed=0)
        hist = train(model, tiny_task, tiny_task, cfg)
        assert len(hist) == 2
        assert [h.split for h in hist] == ["train", "val"]

    def test_fixed_seed_identical_histories(self, tiny_task):
        cfg = TrainConfig(epochs=2, batch_size=8, seed=7)
        h1 = train(make_model("vit", ViTConfig(num_classes=3).to_dict(), seed=1),
                   tiny_task, tiny_task, cfg)
        h2 = train(make_model("vit", ViTConfig(num_classes=3).to_dict(), seed=1),
                   tiny_task, tiny_task, cfg)
        assert h1 == h2

    def test_losses_finite(self, tiny_task):
        model = make_model("vgg-mini", {"num_classes": 3}, seed=0)
        cfg = TrainConfig(epochs=2, batch_size=8, seed=0)
        hist = train(model, tiny_task, None, cfg)
        assert all(np.isfinite(h.loss) for h in hist)

    def test_empty_manifest(self):
        manifest = D.DatasetManifest(name="x", class_names=["a"], entries=[])
        model = make_model("vit", ViTConfig(num_classes=3).to_dict(), seed=0)
        with pytest.raises(EmptyDatasetError):
            train(model, manifest, None, TrainConfig(epochs=1, batch_size=4))

    def test_invalid_config(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(epochs=0)
        with pytest.raises(ConfigurationError):
            TrainConfig(lr=-1.0)


class TestEvaluate:
    def test_perfect_predictions(self, tiny_task):
        model = make_model("vit", ViTConfig(num_classes=3).to_dict(), seed=0)
        cfg = TrainConfig(epochs=200, batch_size=12, seed=0)
        train(model, tiny_task, None, cfg, stop_at_train_acc=1.0)
        record, cm = evaluate(model, tiny_task)
        assert record.accuracy == 1.0
        off_diag = cm.counts - np.diag(np.diag(cm.counts))
        assert off_diag.sum() == 0

    def test_binary_formula(self):
        cm = ConfusionMatrix(2)
        cm.counts[1, 1] = 90
        cm.counts[0, 0] = 85
        cm.counts[0, 1] = 10
        cm.counts[1, 0] = 15
        assert (cm.tp, cm.tn, cm.fp, cm.fn) == (90, 85, 10, 15)
        assert cm.accuracy == (90 + 85) / 200
        assert cm.accuracy == 0.875

    def test_matches_brute_force_counter(self):
        rng = np.random.default_rng(31)
        labels = rng.integers(0, 4, size=1000)
        preds = rng.integers(0, 4, size=1000)
        cm = ConfusionMatrix(4)
        for lab, pred in zip(labels, preds):
            cm.add(int(lab), int(pred))
        # independent brute-force count
        correct = sum(1 for lab, pred in zip(labels, preds) if lab == pred)
        assert cm.total == 1000
        assert cm.accuracy == correct / 1000

    def test_empty_manifest(self):
        manifest = D.DatasetManifest(name="x", class_names=["a"], entries=[])
        model = make_model("vit", ViTConfig(num_classes=3).to_dict(), seed=0)
        with pytest.raises(EmptyDatasetError):
            evaluate(model, manifest)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        model = make_model("vit", ViTConfig(num_classes=3).to_dict(), seed=3)
        ckpt = Checkpoint(kind="vit", config=model.config.to_dict(),
                          params=snapshot_params(model),
                          metadata={"seed": 3, "epochs": 0,
                                    "source_dataset": "none"})
        path = tmp_path / "m.ckpt"
        save_checkpoint(ckpt, path)
        loaded = load_checkpoint(path)
        assert loaded.kind == "vit"
        assert loaded.config == ckpt.config
        assert set(loaded.params) == set(ckpt.params)
        for name in ckpt.params:
            assert np.array_equal(loaded.params[name], ckpt.params[name])

    def test_save_load_save_byte_identical(self, tmp_path):
        model = make_model("resnet-mini", {"num_classes": 2}, seed=4)
        ckpt = Checkpoint(kind="resnet-mini", config=model.config.to_dict(),
                          params=snapshot_params(model))
        p1 = tmp_path / "a.ckpt"
        p2 = tmp_path / "b.ckpt"
        save_checkpoint(ckpt, p1)
        save_checkpoint(load_checkpoint(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_mismatched_config_lists_names(self, tmp_path):
        model = make_model("vit", ViTConfig(num_classes=3).to_dict(), seed=0)
        other = make_model("vit", ViTConfig(num_classes=3, num_layers=1).to_dict(), seed=0)
        with pytest.raises(ValidationError, match="blocks.1"):
            load_params_into(other, snapshot_params(model))


class TestTransferWorkflow:
    def test_pretrain_checkpoint_matches_model(self, tiny_task, tmp_path):
        cfg = TrainConfig(epochs=1, batch_size=8, seed=0)
        ckpt = pretrain("vit", ViTConfig(num_classes=3).to_dict(), tiny_task, cfg)
        assert ckpt.metadata["source_dataset"] == "tiny"
        path = tmp_path / "p.ckpt"
        save_checkpoint(ckpt, path)
        loaded = load_checkpoint(path)
        for name in ckpt.params:
            assert np.array_equal(loaded.params[name], ckpt.params[name])

    def test_pretrain_needs_two_classes(self, tmp_path):
        path = D.generate_synthetic(tmp_path, "one", 1, 4, seed=5)
        manifest = D.load_manifest(path)
        with pytest.raises(ConfigurationError):
            pretrain("vit", ViTConfig(num_classes=1).to_dict(), manifest,
                     TrainConfig(epochs=1, batch_size=4))

    def test_head_replacement_width(self, tiny_task, tmp_path):
        surrogate = ViTConfig(num_classes=10).to_dict()
        ckpt = pretrain("vit", surrogate,
                        _relabel(tiny_task, 10), TrainConfig(epochs=1, batch_size=8))
        model, _ = fine_tune(ckpt, tiny_task, TrainConfig(epochs=1, batch_size=8))
        assert model.config.num_classes == 3
        assert model.params["head.w"].shape == (64, 3)
        logits = model.forward_batch(np.zeros((1, 3, 32, 32)))
        assert logits.shape == (1, 3)

    def test_freeze_backbone_contract(self, tiny_task):
        ckpt = pretrain("vit", ViTConfig(num_classes=3).to_dict(), tiny_task,
                        TrainConfig(epochs=1, batch_size=8, seed=0))
        cfg = TrainConfig(epochs=2, batch_size=8, seed=1, freeze_backbone=True)
        model, _ = fine_tune(ckpt, tiny_task, cfg)
        for name in model.backbone_names():
            assert np.array_equal(model.params[name].data, ckpt.params[name]), name
        # the head must actually have moved
        assert not np.array_equal(model.params["head.w"].data,
                                  np.zeros_like(model.params["head.w"].data))


def _relabel(manifest, num_classes):
    """Same images, label space widened (labels unchanged, still valid)."""
    return D.DatasetManifest(
        name=manifest.name, class_names=[f"c{i}" for i in range(num_classes)],
        entries=list(manifest.entries), root=manifest.root,
    )


class TestComparisonCsv:
    def records(self):
        return [
            MetricsRecord("vit", "colon", 9, "val", 0.9741, 0.2212),
            MetricsRecord("vit", "colon", 9, "train", 0.99, 0.11),
            MetricsRecord("vgg-mini", "colon", 9, "val", 0.91, 0.31),
        ]

    def test_percentage_rendering(self, tmp_path):
        path = tmp_path / "cmp.csv"
        emit_comparison(self.records(), path)
        text = path.read_text()
        assert "vit,colon,9,val,97.41,0.22" in text

    def test_empty_records(self, tmp_path):
        path = tmp_path / "empty.csv"
        emit_comparison([], path)
        assert path.read_text() == "model,dataset,epoch,split,accuracy,loss\n"

    def test_footer_best_val(self, tmp_path):
        path = tmp_path / "cmp.csv"
        emit_comparison(self.records(), path)
        assert "# best val: dataset=colon model=vit" in path.read_text()

    def test_round_trip(self, tmp_path):
        path = tmp_path / "cmp.csv"
        emit_comparison(self.records(), path)
        parsed = parse_comparison(path)
        assert len(parsed) == 3
        vals = {(r.model, r.split): r for r in parsed}
        assert vals[("vit", "val")].accuracy == pytest.approx(0.9741)
        assert vals[("vit", "val")].loss == pytest.approx(0.22)
        # re-emitting the parsed records reproduces the same file
        path2 = tmp_path / "cmp2.csv"
        emit_comparison(parsed, path2)
        assert path.read_text() == path2.read_text()
