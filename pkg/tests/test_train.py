import json
import math

import numpy as np
import pytest
import torch

import icgen
from icgen.data import build_synthetic_suite
from icgen.net import ModelConfig, PromptCompletionNet
from icgen.train import (
    NonFiniteLossError,
    TaskDescriptor,
    TrainConfig,
    build_batch,
    choose_objective,
    compute_loss,
    dump_resolved_config,
    fit,
    load_run_config,
    lr_at,
    make_optimizer,
    parse_config_text,
    pretrain_mim,
    sample_task,
    train_step,
)

def mini_model_cfg():
    return ModelConfig(patch_size=16, embed_dim=32, depth=4, heads=2,
                       tap_layers=(1, 2, 3, 4), decoder_channels=16)


def mini_cfg(**kw):
    base = dict(epochs=1, warmup_epochs=0, steps_per_epoch=4, batch_size=2,
                checkpoint_interval=100, seed=0)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def tiny_suites():
    seg = build_synthetic_suite("segmentation", 3, seed=1, image_size=32, class_count=2,
                                slice_range=(4, 6), dataset_id=1)
    den = build_synthetic_suite("denoising", 3, seed=2, image_size=32,
                                slice_range=(4, 6), dataset_id=2)
    return seg, den


class TestSampleTask:
    def descriptors(self, n_seg=3, n_rest=3):
        seg = [TaskDescriptor(i + 1, "segmentation", "random") for i in range(n_seg)]
        rest = [TaskDescriptor(100 + i, "denoising") for i in range(n_rest)]
        return seg + rest

    def test_each_seg_dataset_gets_weight_over_count(self):
        rng = np.random.default_rng(0)
        counts = {}
        n = 60000
        for _ in range(n):
            d = sample_task(rng, self.descriptors(), 0.5)
            counts[d.dataset_id] = counts.get(d.dataset_id, 0) + 1
        for i in (1, 2, 3):
            assert counts[i] / n == pytest.approx(0.5 / 3, abs=0.01)

    def test_boundary_weight_one_excludes_non_segmentation(self):
        rng = np.random.default_rng(1)
        for _ in range(500):
            assert sample_task(rng, self.descriptors(), 1.0).task_kind == "segmentation"

    def test_long_run_family_frequency(self):
        rng = np.random.default_rng(2)
        n = 100000
        seg_draws = sum(
            sample_task(rng, self.descriptors(), 0.5).task_kind == "segmentation"
            for _ in range(n)
        )
        assert seg_draws / n == pytest.approx(0.5, abs=0.01)

    def test_single_family_warns_and_uses_it(self):
        rng = np.random.default_rng(3)
        seg_only = [TaskDescriptor(1, "segmentation", "random")]
        with pytest.warns(UserWarning, match="one task family"):
            assert sample_task(rng, seg_only, 0.5).task_kind == "segmentation"


class TestChooseObjective:
    def test_segmentation_is_always_autoregressive(self):
        rng = np.random.default_rng(0)
        assert all(
            choose_objective("segmentation", rng, 0.9) == "ar" for _ in range(1000)
        )

    def test_nonseg_mim_fraction_concentrates(self):
        rng = np.random.default_rng(1)
        n = 100000
        mims = sum(choose_objective("denoising", rng, 0.9) == "mim" for _ in range(n))
        assert mims / n == pytest.approx(0.9, abs=0.01)

    def test_zero_fraction_always_ar(self):
        rng = np.random.default_rng(2)
        assert all(choose_objective("synthesis", rng, 0.0) == "ar" for _ in range(100))


class TestLrSchedule:
    TOTAL, WARM, PEAK = 1000, 100, 1e-3

    def test_peak_exactly_at_warmup_end(self):
        assert lr_at(self.WARM, self.TOTAL, self.WARM, self.PEAK) == self.PEAK

    def test_zero_at_final_step(self):
        assert lr_at(self.TOTAL, self.TOTAL, self.WARM, self.PEAK) == pytest.approx(0.0, abs=1e-12)

    def test_half_peak_at_cosine_midpoint(self):
        mid = self.WARM + (self.TOTAL - self.WARM) // 2
        assert lr_at(mid, self.TOTAL, self.WARM, self.PEAK) == pytest.approx(self.PEAK / 2)

    def test_continuous_nonnegative_max_at_warmup_then_nonincreasing(self):
        values = [lr_at(s, self.TOTAL, self.WARM, self.PEAK) for s in range(self.TOTAL + 1)]
        assert all(v >= 0 for v in values)
        assert max(values) == values[self.WARM]
        after = values[self.WARM:]
        assert all(a >= b for a, b in zip(after, after[1:]))
        jumps = np.abs(np.diff(values))
        assert jumps.max() < self.PEAK / self.WARM + 1e-12

    def test_floor_respected(self):
        v = lr_at(self.TOTAL, self.TOTAL, self.WARM, self.PEAK, floor=1e-5)
        assert v == pytest.approx(1e-5)

    def test_out_of_range_step_rejected(self):
        with pytest.raises(ValueError):
            lr_at(-1, 10, 2, 1e-3)
        with pytest.raises(ValueError):
            lr_at(11, 10, 2, 1e-3)


class TestTrainStep:
    def model(self):
        torch.manual_seed(0)
        return PromptCompletionNet(mini_model_cfg())

    def test_zero_gradient_batch_changes_params_only_by_decay(self):
        # zero final conv -> constant 0.5 output; a 0.5 target grid makes the
        # supervised loss exactly zero, so AdamW moves decayed params by the
        # shrinkage term only and leaves undecayed params untouched
        model = self.model()
        with torch.no_grad():
            model.dec_conv2.weight.zero_()
            model.dec_conv2.bias.zero_()
        cfg = mini_cfg()
        opt = make_optimizer(model, cfg)
        grids = np.full((2, 1, 32, 32), 0.5, dtype=np.float32)
        masks = np.zeros((2, 4), dtype=bool)
        masks[:, :2] = True
        batch = {"objective": "mim", "inputs": grids, "masks": masks}
        before = {n: p.detach().clone() for n, p in model.named_parameters()}
        lr = 1e-2
        loss = train_step(model, batch, "mim", opt, cfg, lr=lr)
        assert loss == 0.0
        for name, p in model.named_parameters():
            if p.ndim > 1:
                expected = before[name] * (1 - lr * cfg.weight_decay)
                assert torch.allclose(p, expected, atol=1e-9), name
            else:
                assert torch.equal(p, before[name]), name

    def test_loss_decreases_on_constant_mapping_task(self, tiny_suites):
        """Constant-mapping smoke run: moving average falls within 200 steps."""
        _, den = tiny_suites
        # constant mapping: target equals input everywhere
        vols = [icgen.Volume(v.slices, v.instance_id, targets=v.slices) for v in den.volumes]
        ds = icgen.SliceDataset("const", "synthesis", vols, 2)
        model = self.model()
        cfg = mini_cfg(steps_per_epoch=200, batch_size=2)
        opt = make_optimizer(model, cfg)
        rng = np.random.default_rng(0)
        losses = []
        for step in range(200):
            batch = build_batch(ds, TaskDescriptor(2, "synthesis"), "ar", 2, rng, cfg)
            losses.append(train_step(model, batch, "ar", opt, cfg, lr=5e-4))
        assert np.mean(losses[-50:]) < np.mean(losses[:50]) * 0.5

    def test_same_seed_identical_loss_trace(self, tiny_suites):
        seg, _ = tiny_suites
        traces = []
        for _ in range(2):
            model = self.model()
            cfg = mini_cfg(steps_per_epoch=5)
            opt = make_optimizer(model, cfg)
            rng = np.random.default_rng(7)
            trace = []
            for step in range(5):
                batch = build_batch(seg, TaskDescriptor(1, "segmentation", "random"),
                                    "ar", 2, rng, cfg, pool=icgen.default_value_pool())
                trace.append(train_step(model, batch, "ar", opt, cfg, lr=1e-3))
            traces.append(trace)
        assert traces[0] == traces[1]

    def test_non_finite_loss_aborts_with_diagnostics(self, tiny_suites):
        seg, _ = tiny_suites
        model = self.model()
        with torch.no_grad():
            model.dec_conv2.bias.fill_(float("nan"))
        cfg = mini_cfg()
        opt = make_optimizer(model, cfg)
        rng = np.random.default_rng(0)
        batch = build_batch(seg, TaskDescriptor(1, "segmentation", "random"), "ar", 2,
                            rng, cfg, pool=icgen.default_value_pool())
        with pytest.raises(NonFiniteLossError, match="step 3"):
            train_step(model, batch, "ar", opt, cfg, lr=1e-3, step=3, task="seg")


class TestFit:
    def test_one_epoch_writes_checkpoint_and_log(self, tiny_suites, tmp_path):
        seg, den = tiny_suites
        cfg = mini_cfg(steps_per_epoch=6, checkpoint_interval=3)
        ckpt, log = fit(cfg, [seg, den], tmp_path, model_cfg=TestTrainStep().model().cfg)
        assert ckpt.exists()
        assert (tmp_path / "checkpoints" / "step_0000003.pt").exists()
        lines = [json.loads(l) for l in log.read_text().splitlines()]
        assert len(lines) == 6
        assert all({"step", "loss", "lr", "task", "objective"} <= set(l) for l in lines)

    def test_seg_only_run_never_invokes_mim(self, tiny_suites, tmp_path):
        seg, _ = tiny_suites
        cfg = mini_cfg(steps_per_epoch=8)
        with pytest.warns(UserWarning):
            _, log = fit(cfg, [seg], tmp_path, model_cfg=TestTrainStep().model().cfg)
        lines = [json.loads(l) for l in log.read_text().splitlines()]
        assert all(l["objective"] == "ar" for l in lines)

    def test_objective_routing_on_trace(self, tiny_suites, tmp_path):
        seg, den = tiny_suites
        cfg = mini_cfg(steps_per_epoch=30)
        _, log = fit(cfg, [seg, den], tmp_path, model_cfg=TestTrainStep().model().cfg)
        for line in log.read_text().splitlines():
            rec = json.loads(line)
            if rec["task"] == seg.name:
                assert rec["objective"] == "ar"

    def test_resume_continues_step_counter_and_lr_trace(self, tiny_suites, tmp_path):
        seg, _ = tiny_suites
        mc = TestTrainStep().model().cfg
        cfg = mini_cfg(steps_per_epoch=8, warmup_epochs=0, checkpoint_interval=4)

        full_dir = tmp_path / "full"
        with pytest.warns(UserWarning):
            _, full_log = fit(cfg, [seg], full_dir, model_cfg=mc)

        part_dir = tmp_path / "part"
        with pytest.warns(UserWarning):
            fit(mini_cfg(steps_per_epoch=4, checkpoint_interval=4), [seg], part_dir, model_cfg=mc)
        # hand the 4-step checkpoint back as a resume point for the 8-step run
        with pytest.warns(UserWarning):
            _, resumed_log = fit(cfg, [seg], part_dir, model_cfg=mc,
                                 resume=part_dir / "checkpoints" / "final.pt")

        full = [json.loads(l) for l in full_log.read_text().splitlines()]
        resumed = [json.loads(l) for l in resumed_log.read_text().splitlines()]
        assert [l["step"] for l in resumed] == list(range(8))
        assert [l["lr"] for l in resumed] == [l["lr"] for l in full]

    def test_identical_seeds_identical_metrics_files(self, tiny_suites, tmp_path):
        seg, den = tiny_suites
        cfg = mini_cfg(steps_per_epoch=6)
        mc = TestTrainStep().model().cfg
        _, log1 = fit(cfg, [seg, den], tmp_path / "a", model_cfg=mc)
        _, log2 = fit(cfg, [seg, den], tmp_path / "b", model_cfg=mc)
        assert log1.read_bytes() == log2.read_bytes()


class TestPretrain:
    def test_pretrain_reduces_heldout_reconstruction_loss(self, tmp_path):
        rng = np.random.default_rng(0)
        suite = build_synthetic_suite("denoising", 4, seed=5, image_size=32, slice_range=(6, 8))
        slices = np.concatenate([v.targets for v in suite.volumes])
        held_out = slices[-4:]
        train_slices = slices[:-4]
        cfg = mini_cfg(steps_per_epoch=60, batch_size=4, mask_ratio=0.75)
        mc = TestTrainStep().model().cfg

        def heldout_loss(model):
            from icgen.seqbuild import sample_patch_mask
            from icgen.net import masked_loss as ml
            rng2 = np.random.default_rng(1)
            n_tok = (32 // 16) * (32 // 16)
            masks = np.stack([sample_patch_mask(n_tok, 0.75, rng2).as_bool() for _ in held_out])
            x = torch.from_numpy(held_out[:, None])
            with torch.no_grad():
                pred = model(x, placeholder=masks)
            return ml(pred, x, masks, beta=1.0, patch_size=16).item()

        torch.manual_seed(0)
        fresh = PromptCompletionNet(mc)
        before = heldout_loss(fresh)
        ckpt, _ = pretrain_mim(cfg, train_slices, tmp_path, model_cfg=mc)
        trained, _ = icgen.load_checkpoint(ckpt)
        after = heldout_loss(trained)
        assert after < before * 0.7

    def test_checkpoint_loads_into_fit(self, tiny_suites, tmp_path):
        seg, _ = tiny_suites
        mc = TestTrainStep().model().cfg
        slices = np.concatenate([v.slices for v in seg.volumes])
        ckpt, _ = pretrain_mim(mini_cfg(steps_per_epoch=2), slices, tmp_path / "pre", model_cfg=mc)
        with pytest.warns(UserWarning):
            fit(mini_cfg(steps_per_epoch=2), [seg], tmp_path / "fine", model_cfg=mc,
                init_from=ckpt)


class TestConfigFiles:
    def test_parse_round_trip(self):
        text = "epochs = 3\nwarmup_epochs = 1\npeak_lr = 5e-4  # comment\nmodel.depth = 4\n"
        values = parse_config_text(text)
        assert values["epochs"] == "3"
        assert values["peak_lr"] == "5e-4"

    def test_load_run_config_with_overrides(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text(
            "epochs = 3\nsteps_per_epoch = 10\nmodel.depth = 4\nmodel.embed_dim = 32\n"
            "model.heads = 2\nmodel.tap_layers = 1,2,3,4\nscheme = random\n"
        )
        train_cfg, model_cfg, extras = load_run_config(path, overrides={"epochs": 5})
        assert train_cfg.epochs == 5
        assert train_cfg.steps_per_epoch == 10
        assert model_cfg.depth == 4
        assert extras["scheme"] == "random"

    def test_unknown_model_key_rejected(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("model.bogus = 3\n")
        with pytest.raises(ValueError, match="model.bogus"):
            load_run_config(path)

    def test_malformed_line_rejected(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("epochs 3\n")
        with pytest.raises(ValueError, match="line 1"):
            load_run_config(path)

    def test_dump_resolves_back(self, tmp_path):
        cfg = TrainConfig(epochs=2)
        mc = ModelConfig()
        text = dump_resolved_config(cfg, mc, {"scheme": "random"})
        path = tmp_path / "c.txt"
        path.write_text(text)
        back_train, back_model, extras = load_run_config(path)
        assert back_train == cfg
        assert back_model == mc
        assert extras["scheme"] == "random"
