import copy
import json
import math
import os

import numpy as np
import numpy.testing as npt
import pytest
import torch

from weathergap.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from weathergap.corruption import CorruptionRecord, WeatherConfig, corrupt, sample_weather_params
from weathergap.model import AdaptiveDetector, ModelConfig, build_model
from weathergap.scenes import (
    SOURCE_CLEAR,
    TARGET_ADVERSE,
    CorruptionConfig,
    GenConfig,
    LabeledImage,
    build_dataset,
    render,
    sample_scene,
)
from weathergap.seeding import rng_from
from weathergap.trainer import (
    LabelLeakError,
    TrainConfig,
    Trainer,
    TrainingDiverged,
    pseudo_boxes,
    train,
)

GEN = GenConfig(image_size=32, size_range=(8.0, 13.0), max_objects=2)
CALM_WEATHER = WeatherConfig(kinds=("fog",), fog_beta_range=(0.3, 0.8), fog_depth_modes=("constant",), fog_depth_range=(1.0, 1.5))


def make_source(n, seed0=0):
    items = []
    for i in range(n):
        img = render(sample_scene(seed0 + i, GEN))
        img.image_id = f"src_{i}"
        items.append(img)
    return items


def make_target(n, seed0=100):
    rng = rng_from(4321)
    items = []
    for i in range(n):
        img = render(sample_scene(seed0 + i, GEN))
        record = CorruptionRecord(weather=sample_weather_params(rng, CALM_WEATHER), seed=i)
        pixels, _ = corrupt(img.pixels, record)
        items.append(LabeledImage(pixels=pixels, boxes=None, domain=TARGET_ADVERSE, corruption=record, image_id=f"tgt_{i}"))
    return items


def small_trainer(mode="full", steps=3, seed=1, **kwargs):
    fields = dict(steps=steps, batch_size=2, lr=0.01, seed=seed, mode=mode, val_every=1000, checkpoint_every=0)
    fields.update(kwargs)
    config = TrainConfig(**fields)
    model = build_model(ModelConfig(num_classes=3, channels=8, embed_dim=4), init_seed=seed)
    return Trainer(model, config, make_source(6), make_target(6), source_val=None, weather_cfg=CALM_WEATHER)


class TestCheckpointFormat:
    def test_round_trip_exact(self, tmp_path, rng):
        arrays = {"a/w": rng.normal(size=(3, 4)).astype(np.float32), "b": np.arange(5, dtype=np.int64)}
        path = str(tmp_path / "x.ckpt")
        save_checkpoint(path, {"step": 7, "note": "hi"}, arrays)
        meta, loaded = load_checkpoint(path)
        assert meta["step"] == 7 and meta["note"] == "hi"
        for k in arrays:
            npt.assert_array_equal(loaded[k], arrays[k])
            assert loaded[k].dtype == arrays[k].dtype

    def test_rejects_non_checkpoint_file(self, tmp_path):
        path = str(tmp_path / "junk.ckpt")
        with open(path, "wb") as f:
            f.write(b"not a checkpoint")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_model_save_load_identical_params(self, tmp_path):
        model = build_model(ModelConfig(num_classes=3, channels=8), init_seed=3)
        path = str(tmp_path / "m.ckpt")
        model.save(path, meta={"step": 0})
        loaded, meta, _ = AdaptiveDetector.load(path)
        assert meta["step"] == 0
        for (name_a, p_a), (name_b, p_b) in zip(model.state_dict().items(), loaded.state_dict().items()):
            assert name_a == name_b
            assert torch.equal(p_a, p_b)


class TestSgdOracle:
    def test_matches_hand_computed_momentum_sequence(self):
        # 1-parameter quadratic: f(p) = 0.5 * (p - 3)^2, grad = p - 3
        lr, mu = 0.1, 0.9
        p = torch.tensor([0.0], dtype=torch.float64, requires_grad=True)
        opt = torch.optim.SGD([p], lr=lr, momentum=mu)
        hand_p, hand_v = 0.0, 0.0
        for step in range(10):
            opt.zero_grad()
            loss = 0.5 * (p - 3.0) ** 2
            loss.backward()
            opt.step()
            g = hand_p - 3.0
            hand_v = g if step == 0 else mu * hand_v + g
            hand_p = hand_p - lr * hand_v
            npt.assert_allclose(float(p.detach()), hand_p, rtol=1e-14)


class TestTotalLoss:
    def test_source_only_total_is_detection_loss_exactly(self):
        t = small_trainer(mode="source_only")
        source, target = t._draw_batches()
        total, comp = t.total_loss(source, target, step=0)
        assert float(total.detach()) == comp["L_det"]
        assert comp["L_sty"] == 0.0 and comp["L_wea"] == 0.0

    def test_zero_weights_in_full_mode_equal_detection_loss(self):
        t_full = small_trainer(mode="full", lambda_style=0.0, lambda_weather=0.0)
        t_src = small_trainer(mode="source_only")
        source, target = t_full._draw_batches()
        total_full, _ = t_full.total_loss(source, target, step=0)
        total_src, _ = t_src.total_loss(source, target, step=0)
        assert float(total_full.detach()) == float(total_src.detach())

    def test_components_match_independent_recomputation(self):
        from weathergap.detector import assign_targets, detection_loss
        from weathergap.style_align import adversarial_style_loss, grl_lambda
        from weathergap.weather_contrast import weather_alignment_loss
        import weathergap.seeding as seeding

        t = small_trainer(mode="full", seed=5)
        source, target = t._draw_batches()
        step = 2
        total, comp = t.total_loss(source, target, step)

        pixels = torch.from_numpy(np.stack([x.pixels for x in source])).to(t.dtype)
        fmap, preds = t.model(pixels)
        det, _ = detection_loss(preds, [assign_targets(x.boxes, (4, 4), 8) for x in source])
        lam = grl_lambda(step, t.config.steps, t.config.grl_lambda_max)
        t_pixels = torch.from_numpy(np.stack([x.pixels for x in target])).to(t.dtype)
        sty, _ = adversarial_style_loss(
            fmap, t.model.features(t_pixels), t.model.style_attention, t.model.style_discriminator, lam
        )
        wea, _ = weather_alignment_loss(
            source, t.model.backbone, t.model.projector, t.weather_cfg,
            seeding.derive_seed(t.config.seed, seeding.VIEWS, step), t.config.temperature,
        )
        expected = float((det + t.config.lambda_style * sty + t.config.lambda_weather * wea).detach())
        npt.assert_allclose(float(total.detach()), expected, rtol=1e-6)
        npt.assert_allclose(comp["L_det"], float(det.detach()), rtol=1e-6)
        npt.assert_allclose(comp["L_sty"], float(sty.detach()), rtol=1e-6)
        npt.assert_allclose(comp["L_wea"], float(wea.detach()), rtol=1e-6)

    def test_labeled_target_batch_hard_error(self):
        t = small_trainer(mode="style_only")
        source, _ = t._draw_batches()
        leaked = make_source(2)
        for item in leaked:
            item.domain = TARGET_ADVERSE
        with pytest.raises(LabelLeakError):
            t.total_loss(source, leaked, step=0)

    def test_unlabeled_source_batch_hard_error(self):
        t = small_trainer(mode="source_only")
        source, target = t._draw_batches()
        broken = [LabeledImage(pixels=s.pixels, boxes=None, domain=SOURCE_CLEAR) for s in source]
        with pytest.raises(LabelLeakError):
            t.total_loss(broken, target, step=0)


class TestTrainStep:
    def test_zero_learning_rate_leaves_parameters_unchanged(self):
        # TrainConfig rejects lr=0, so zero the optimizer directly.
        t = small_trainer(mode="source_only")
        for group in t.optimizer.param_groups:
            group["lr"] = 0.0
        before = copy.deepcopy(t.model.state_dict())
        source, target = t._draw_batches()
        t.train_step(source, target)
        for k, v in t.model.state_dict().items():
            assert torch.equal(v, before[k])

    def test_two_runs_same_seed_identical_parameters(self):
        results = []
        for _ in range(2):
            t = small_trainer(mode="full", steps=10, seed=3)
            for _step in range(10):
                s, tb = t._draw_batches()
                t.train_step(s, tb)
            results.append({k: v.clone() for k, v in t.model.state_dict().items()})
        for k in results[0]:
            assert torch.equal(results[0][k], results[1][k]), k

    def test_divergence_aborts_with_diagnostics(self):
        t = small_trainer(mode="source_only")
        with torch.no_grad():
            t.model.head.objectness_conv.bias.fill_(float("nan"))
        source, target = t._draw_batches()
        with pytest.raises(TrainingDiverged) as err:
            t.train_step(source, target)
        assert "L_det" in err.value.components


class TestRunLoop:
    def test_single_step_run_one_row_one_checkpoint(self, tmp_path):
        t = small_trainer(mode="source_only", steps=1)
        t.source_val = make_source(2, seed0=50)
        out = str(tmp_path / "run")
        result = t.run(out)
        with open(result["metrics_csv"]) as f:
            lines = f.read().strip().splitlines()
        assert lines[0] == "step,L_det,L_sty,L_wea,total,grl_lambda,pos_cosine,val_map"
        assert len(lines) == 2
        checkpoints = [f for f in os.listdir(out) if f.endswith(".ckpt")]
        assert checkpoints == ["final.ckpt"]
        # final row carries a validation mAP
        assert lines[1].split(",")[-1] != ""

    def test_mode_gating_in_csv(self, tmp_path):
        for mode, zero_col in (("style_only", "L_wea"), ("weather_only", "L_sty")):
            t = small_trainer(mode=mode, steps=3)
            out = str(tmp_path / mode)
            result = t.run(out)
            with open(result["metrics_csv"]) as f:
                header, *rows = f.read().strip().splitlines()
            idx = header.split(",").index(zero_col)
            active_idx = header.split(",").index("L_sty" if zero_col == "L_wea" else "L_wea")
            for row in rows:
                assert float(row.split(",")[idx]) == 0.0
                assert float(row.split(",")[active_idx]) != 0.0

    def test_checkpoint_resume_reproduces_uninterrupted_loss(self, tmp_path):
        steps = 4
        losses_a = []
        t_a = small_trainer(mode="full", steps=steps, seed=8)
        for _ in range(steps):
            s, tb = t_a._draw_batches()
            losses_a.append(t_a.train_step(s, tb)["total"])

        t_b = small_trainer(mode="full", steps=steps, seed=8)
        for _ in range(2):
            s, tb = t_b._draw_batches()
            t_b.train_step(s, tb)
        ckpt = str(tmp_path / "mid.ckpt")
        t_b.save_checkpoint(ckpt)

        t_c = Trainer.resume(ckpt, make_source(6), make_target(6), weather_cfg=CALM_WEATHER)
        assert t_c.step == 2
        s, tb = t_c._draw_batches()
        resumed_loss = t_c.train_step(s, tb)["total"]
        assert resumed_loss == losses_a[2]


class TestTrainOnManifest:
    SPLITS = {"source_train": 6, "target_train": 6, "source_test": 2, "target_test": 2}

    def build(self, tmp_path, name="data"):
        return build_dataset(GEN, CorruptionConfig(), self.SPLITS, str(tmp_path / name), master_seed=77)

    def config(self, **kw):
        base = dict(steps=2, batch_size=2, lr=0.01, seed=2, mode="full", val_every=1000, checkpoint_every=0)
        base.update(kw)
        return TrainConfig(**base)

    def test_writes_checkpoint_and_csv(self, tmp_path):
        manifest = self.build(tmp_path)
        out = str(tmp_path / "run")
        result = train(self.config(), ModelConfig(channels=8, embed_dim=4), manifest, out, weather_cfg=CALM_WEATHER)
        assert os.path.exists(result["final_checkpoint"])
        assert os.path.exists(result["metrics_csv"])

    def test_deleting_target_labels_changes_nothing(self, tmp_path):
        manifest = self.build(tmp_path)
        out_a = str(tmp_path / "run_a")
        train(self.config(), ModelConfig(channels=8, embed_dim=4), manifest, out_a, weather_cfg=CALM_WEATHER)

        # strip every target label from a copy of the dataset
        stripped_dir = str(tmp_path / "stripped")
        import shutil

        shutil.copytree(os.path.dirname(manifest), stripped_dir)
        stripped_manifest = os.path.join(stripped_dir, "manifest.json")
        with open(stripped_manifest) as f:
            doc = json.load(f)
        for entry in doc["images"]:
            if entry["split"].startswith("target"):
                entry["boxes"] = []
        with open(stripped_manifest, "w") as f:
            json.dump(doc, f, indent=2, sort_keys=True)

        out_b = str(tmp_path / "run_b")
        train(self.config(), ModelConfig(channels=8, embed_dim=4), stripped_manifest, out_b, weather_cfg=CALM_WEATHER)
        with open(os.path.join(out_a, "metrics.csv"), "rb") as f:
            csv_a = f.read()
        with open(os.path.join(out_b, "metrics.csv"), "rb") as f:
            csv_b = f.read()
        assert csv_a == csv_b

    def test_same_config_same_bytes(self, tmp_path):
        manifest = self.build(tmp_path)
        blobs = []
        for name in ("r1", "r2"):
            out = str(tmp_path / name)
            result = train(self.config(), ModelConfig(channels=8, embed_dim=4), manifest, out, weather_cfg=CALM_WEATHER)
            with open(result["final_checkpoint"], "rb") as f:
                ckpt = f.read()
            with open(result["metrics_csv"], "rb") as f:
                csv = f.read()
            blobs.append((ckpt, csv))
        assert blobs[0][0] == blobs[1][0]
        assert blobs[0][1] == blobs[1][1]


class TestPseudoBoxes:
    def test_untrained_model_yields_no_confident_boxes(self):
        model = build_model(ModelConfig(num_classes=3, channels=8), init_seed=0)
        image = render(sample_scene(0, GEN))
        assert pseudo_boxes(model, image.pixels, score_threshold=0.8) == []

    def test_threshold_one_empty(self):
        model = build_model(ModelConfig(num_classes=3, channels=8), init_seed=0)
        image = render(sample_scene(1, GEN))
        assert pseudo_boxes(model, image.pixels, score_threshold=1.0) == []

    def test_pseudo_instance_mode_runs(self):
        t = small_trainer(mode="weather_only", use_target_pseudo_instances=True, pseudo_score_threshold=0.0)
        s, tb = t._draw_batches()
        comp = t.train_step(s, tb)
        assert np.isfinite(comp["total"])
