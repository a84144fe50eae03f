import json

import numpy as np
import pytest
import torch
from scipy.stats import chisquare

from bmdsr import training
from bmdsr.checkpoint import load_model, read_checkpoint
from bmdsr.data_pipeline import DataError, ToySuiteSpec, TrainingSample, build_dataset
from bmdsr.training import (
    SampleStore,
    TrainConfig,
    TrainingAborted,
    batch_stream,
    default_patch,
    optimizer_steps,
    run_ablation,
    sample_batch,
    train,
)


def _sample(lr=40, scale=4, seed=0, sid="s"):
    rng = np.random.default_rng(seed)
    return TrainingSample(blur_lr=rng.uniform(size=(lr, lr, 3)).astype(np.float32),
                          sharp_lr=rng.uniform(size=(7, lr, lr, 3)).astype(np.float32),
                          sharp_hr=rng.uniform(size=(lr * scale, lr * scale, 3)).astype(np.float32),
                          scale=scale, sample_id=sid)


def _tiny(**kw):
    base = dict(scale=2, patch=16, batch_size=2, channel_multiplier=0.125, max_steps=10,
                val_every=0, seed=0)
    base.update(kw)
    return TrainConfig(**base)


class TestConfig:
    def test_reference_defaults(self):
        cfg = TrainConfig(scale=4)
        assert (cfg.batch_size, cfg.patch, cfg.lr, cfg.epochs) == (4, 128, 1e-4, 400)
        assert cfg.betas == (0.9, 0.999)

    def test_patch_rounded_for_scale_three(self):
        assert default_patch(3) == 120
        assert TrainConfig(scale=3).patch == 120

    def test_patch_invariant(self):
        with pytest.raises(ValueError):
            TrainConfig(scale=4, patch=100)
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)

    def test_round_trip(self):
        cfg = TrainConfig.desk(variant="C")
        assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg

    def test_unknown_key(self):
        with pytest.raises(ValueError):
            TrainConfig.from_dict({"momentum": 0.9})


class TestSampling:
    def test_alignment(self):
        cfg = TrainConfig(scale=4, patch=128, batch_size=3)
        store = SampleStore([_sample()], lr_patch=32)
        batch = sample_batch(store, cfg, np.random.default_rng(0))
        s = store.samples[0]
        assert batch.blur_lr.shape == (3, 3, 32, 32)
        assert batch.sharp_lr.shape == (3, 7, 3, 32, 32)
        assert batch.sharp_hr.shape == (3, 3, 128, 128)
        for k, (y, x) in enumerate(batch.origins):
            hr = s.sharp_hr[4 * y:4 * y + 128, 4 * x:4 * x + 128]
            assert np.array_equal(batch.sharp_hr[k].permute(1, 2, 0).numpy(), hr)
            lr = s.blur_lr[y:y + 32, x:x + 32]
            assert np.array_equal(batch.blur_lr[k].permute(1, 2, 0).numpy(), lr)

    def test_same_seed_same_crops(self):
        cfg = TrainConfig(scale=4, patch=128)
        store = SampleStore([_sample(), _sample(seed=1, sid="t")], lr_patch=32)
        a = sample_batch(store, cfg, np.random.default_rng(7))
        b = sample_batch(store, cfg, np.random.default_rng(7))
        assert a.origins == b.origins and a.sample_ids == b.sample_ids

    def test_crop_origins_uniform(self):
        cfg = TrainConfig(scale=4, patch=128, batch_size=1)
        store = SampleStore([_sample(lr=40)], lr_patch=32)
        rng = np.random.default_rng(0)
        counts = np.zeros((9, 9))
        for _ in range(10_000):
            (_, y, x), = training.plan_batch(store, cfg, rng)
            counts[y, x] += 1
        assert chisquare(counts.ravel()).pvalue > 0.01

    def test_small_sample_skipped(self, caplog):
        store = SampleStore([_sample(lr=40), _sample(lr=16, sid="small")], lr_patch=32)
        assert len(store) == 1
        assert "small" in caplog.text
        with pytest.raises(DataError):
            SampleStore([_sample(lr=16)], lr_patch=32)

    def test_prefetch_does_not_change_stream(self):
        store = SampleStore([_sample(seed=i, sid=str(i)) for i in range(3)], lr_patch=32)
        plain = TrainConfig(scale=4, patch=128)
        threaded = TrainConfig(scale=4, patch=128, workers=2)
        a = list(batch_stream(store, plain, np.random.default_rng(3), 6))
        b = list(batch_stream(store, threaded, np.random.default_rng(3), 6))
        for x, y in zip(a, b):
            assert x.origins == y.origins and torch.equal(x.sharp_hr, y.sharp_hr)


class TestTrain:
    def test_same_seed_same_losses(self, toy_manifest, tmp_path):
        a = train(toy_manifest, _tiny(variant="FC"), tmp_path / "a")
        b = train(toy_manifest, _tiny(variant="FC"), tmp_path / "b")
        assert abs(a.history[9]["total"] - b.history[9]["total"]) <= 1e-6

    def test_variant_c_log_keys(self, toy_manifest, tmp_path):
        res = train(toy_manifest, _tiny(variant="C", max_steps=3), tmp_path)
        lines = [json.loads(l) for l in res.log_path.read_text().splitlines()]
        assert len(lines) == 3
        for entry in lines:
            assert not any("fornet" in k or "backnet" in k or "funet" in k for k in entry)
            assert {"step", "total", "lr", "wallclock", "s2d_central", "s2d_pairwise",
                    "content_corenet"} <= set(entry)

    def test_resume_equivalence(self, toy_manifest, tmp_path):
        full = train(toy_manifest, _tiny(variant="FCB", max_steps=20), tmp_path / "full")
        train(toy_manifest, _tiny(variant="FCB", max_steps=10), tmp_path / "half")
        resumed = train(toy_manifest, _tiny(variant="FCB", max_steps=20), tmp_path / "half",
                        resume_from=tmp_path / "half" / "last.pt")
        assert abs(full.history[-1]["total"] - resumed.history[-1]["total"]) <= 1e-6
        a, b = load_model(full.checkpoint), load_model(resumed.checkpoint)
        for (k, x), (_, y) in zip(a.state_dict().items(), b.state_dict().items()):
            assert torch.allclose(x, y, atol=1e-6), k
        log = [json.loads(l) for l in (tmp_path / "half" / "metrics.jsonl").read_text().splitlines()]
        assert [e["step"] for e in log] == list(range(1, 21))

    def test_step_accounting(self, toy_manifest, tmp_path):
        res = train(toy_manifest, _tiny(variant="C", max_steps=7), tmp_path)
        ckpt = read_checkpoint(res.checkpoint)
        opt = torch.optim.Adam(res.model.parameters())
        opt.load_state_dict(ckpt["optimizer"])
        logged = len(res.log_path.read_text().splitlines())
        assert optimizer_steps(opt) == logged == res.state.step == 7

    def test_only_active_subnetworks_exist_and_update(self, toy_manifest, tmp_path):
        cfg = _tiny(variant="SRNET", max_steps=3)
        torch.manual_seed(0)
        init = training.BMDSRNet(cfg.model_config()).state_dict()
        res = train(toy_manifest, cfg, tmp_path)
        keys = set(res.model.state_dict())
        assert all(k.startswith("corenet.") for k in keys)
        changed = [k for k, v in res.model.state_dict().items() if not torch.equal(v, init[k])]
        assert set(changed) == {k for k, _ in res.model.named_parameters()}

    def test_fc_has_no_backward_stream(self, toy_manifest, tmp_path):
        res = train(toy_manifest, _tiny(variant="FC", max_steps=2), tmp_path)
        out = res.model(torch.rand(1, 3, 16, 16))
        assert "backnet" not in out.stream_hr

    def test_nan_aborts_and_keeps_last_good(self, toy_manifest, tmp_path, monkeypatch):
        real = training.total_loss
        calls = {"n": 0}

        def flaky(*a, **kw):
            calls["n"] += 1
            b = real(*a, **kw)
            if calls["n"] == 4:
                b.terms["content_corenet"] = b.terms["content_corenet"] * float("nan")
            return b

        monkeypatch.setattr(training, "total_loss", flaky)
        with pytest.raises(TrainingAborted):
            train(toy_manifest, _tiny(variant="SRNET", checkpoint_every=1), tmp_path)
        dump = json.loads((tmp_path / "nan_dump.json").read_text())
        assert dump["step"] == 4 and len(dump["sample_ids"]) == 2
        assert read_checkpoint(tmp_path / "last.pt")["train_state"]["step"] == 3

    def test_validation_keeps_best(self, toy_manifest, tmp_path):
        res = train(toy_manifest, _tiny(variant="SRNET", max_steps=6, val_every=1, val_samples=1),
                    tmp_path)
        assert res.best_checkpoint is not None
        assert read_checkpoint(res.best_checkpoint)["train_state"]["best_psnr"] is not None

    def test_cosine_schedule(self, toy_manifest, tmp_path):
        res = train(toy_manifest, _tiny(variant="SRNET", max_steps=4, lr_schedule="cosine"), tmp_path)
        lrs = [e["lr"] for e in res.history]
        assert lrs[0] == pytest.approx(1e-4) and lrs == sorted(lrs, reverse=True)


@pytest.fixture(scope="module")
def manifests(tmp_path_factory):
    suite = ToySuiteSpec(n_sequences=3, n_frames=7, height=48, width=48, seed=2)
    return {n: build_dataset(suite, tmp_path_factory.mktemp(f"abl{n}"), scale=n)
            for n in (2, 3, 4)}


class TestAblation:
    def test_table_shape(self, manifests, tmp_path):
        cfg = TrainConfig(scale=2, patch=16, batch_size=1, channel_multiplier=0.125,
                          max_steps=1, val_every=0)
        report = run_ablation(manifests, cfg, tmp_path)
        assert len(report.table) == 12
        assert {(r["scale"], r["variant"]) for r in report.table} == set(training.REFERENCE_RESULTS)
        assert all(r["psnr"] is not None for r in report.table)
        text = report.format_table()
        assert "BMDSRNet(F+C+B)" in text and "28.78" in text
        assert (tmp_path / "ablation.json").exists()

    def test_failed_cell_absent(self, manifests, tmp_path, monkeypatch):
        real = training.train

        def fail_fc(manifest, cfg, *a, **kw):
            if cfg.variant == "FC":
                raise RuntimeError("boom")
            return real(manifest, cfg, *a, **kw)

        monkeypatch.setattr(training, "train", fail_fc)
        cfg = TrainConfig(scale=2, patch=16, batch_size=1, channel_multiplier=0.125,
                          max_steps=1, val_every=0)
        report = run_ablation({2: manifests[2]}, cfg, tmp_path, variants=("SRNET", "FC"))
        fc = [r for r in report.table if r["variant"] == "FC"][0]
        assert fc["psnr"] is None and fc["n_seeds"] == 0
        assert "boom" in [r for r in report.rows if r["variant"] == "FC"][0]["error"]
