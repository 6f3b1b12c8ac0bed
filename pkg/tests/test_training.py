"""Losses, freezing, determinism, and the ablation switchboard."""

import numpy as np
import pytest

from ivit.autodiff import Tensor, kl_rows, softmax_rows
from ivit.data import DatasetSpec, gen_synthetic
from ivit.model import ModelConfig, as_leaves, forward, init_params
from ivit.training import (
    ArrayDataset,
    LossBreakdown,
    MomentumSGD,
    RunConfig,
    Switches,
    TrainSettings,
    alignment_loss,
    alignment_loss_np,
    class_row_distribution,
    class_row_distribution_np,
    finetune_trainable,
    total_loss,
    train,
)

TINY_MODEL = ModelConfig(image_size=8, patch_size=4, embed_dim=8, heads=2,
                         layers=2, classes=3, gcn_hidden=4)
TINY_DATA = DatasetSpec(classes=3, samples=18, image_size=8, patch_size=4)


def tiny_cfg(**kw):
    settings = dict(epochs=2, batch=4, lr=0.05, seed=0, stage="two-stage")
    settings.update(kw.pop("train", {}))
    return RunConfig(model=TINY_MODEL, train=TrainSettings(**settings),
                     data=TINY_DATA, switches=kw.pop("switches", Switches()))


class FakeLayer:
    def __init__(self, attn):
        self.guided_t = Tensor(attn)
        self.visual_t = Tensor(attn)


def make_trace_matching(teacher, layers=3, heads=2):
    """Trace whose extracted class rows equal the teacher exactly."""
    n = len(teacher)
    t = n + 1
    attn = np.zeros((1, heads, t, t))
    attn[:, :, 0, 1:] = teacher          # class row: zero class column
    attn[:, :, 1:, :] = 1.0 / t          # other rows irrelevant
    return [FakeLayer(attn) for _ in range(layers)]


class TestClassRowDistribution:
    def test_tensor_and_ndarray_agree(self):
        rng = np.random.default_rng(0)
        attn = softmax_rows(rng.standard_normal((2, 3, 5, 5)))
        t = class_row_distribution(Tensor(attn)).data
        n = class_row_distribution_np(attn)
        np.testing.assert_allclose(t, n, atol=1e-12)
        np.testing.assert_allclose(t.sum(-1), 1.0, atol=1e-12)

    def test_extraction_convention(self):
        # head-average, row 0, drop column 0, renormalize
        attn = np.zeros((1, 1, 3, 3))
        attn[0, 0, 0] = [0.5, 0.3, 0.2]
        row = class_row_distribution_np(attn)[0]
        np.testing.assert_allclose(row, [0.6, 0.4], atol=1e-12)


class TestAlignmentLoss:
    def test_perfect_match_zero(self):
        teacher = np.array([0.25, 0.25, 0.4, 0.1])
        trace = make_trace_matching(teacher)
        val = alignment_loss(trace, teacher[None, :], lam=0.0)
        assert abs(float(val.data)) <= 1e-9

    def test_uniform_student_onehot_teacher_smoothed(self):
        n = 4
        teacher = np.zeros(n)
        teacher[2] = 1.0
        uniform = np.full(n, 1.0 / n)
        trace = make_trace_matching(uniform, layers=2)
        val = alignment_loss(trace, teacher[None, :], lam=1e-3)
        # direct summation oracle on the smoothed teacher
        expect = kl_rows(uniform, teacher, 1e-3)
        np.testing.assert_allclose(float(val.data), expect, rtol=1e-6)

    def test_uniform_teacher_analytic_identity(self):
        rng = np.random.default_rng(1)
        p = softmax_rows(rng.standard_normal(6))
        teacher = np.full(6, 1.0 / 6)
        trace = make_trace_matching(p, layers=1)
        val = alignment_loss(trace, teacher[None, :], lam=0.0)
        expect = np.log(6) - (-(p * np.log(p)).sum())
        np.testing.assert_allclose(float(val.data), expect, rtol=1e-9)

    def test_layer_mean(self):
        teacher = np.array([0.5, 0.5, 0.0, 0.0])
        student = np.array([0.25, 0.25, 0.25, 0.25])
        trace = make_trace_matching(student, layers=4)
        val = alignment_loss(trace, teacher[None, :], lam=1e-3)
        per_layer = kl_rows(student, teacher, 1e-3)
        np.testing.assert_allclose(float(val.data), per_layer, rtol=1e-6)

    def test_shape_mismatch(self):
        trace = make_trace_matching(np.full(4, 0.25))
        with pytest.raises(ValueError, match="patch count"):
            alignment_loss(trace, np.full((1, 9), 1 / 9), lam=0.0)

    def test_scalar_reference_helper(self):
        rows = np.array([[0.5, 0.5], [0.25, 0.75]])
        teacher = np.array([0.5, 0.5])
        expect = np.mean([kl_rows(r, teacher, 1e-3) for r in rows])
        np.testing.assert_allclose(alignment_loss_np(rows, teacher, 1e-3), expect)


class TestTotalLoss:
    def _setup(self, switches):
        rng = np.random.default_rng(2)
        params = {k: v.astype(np.float64)
                  for k, v in init_params(TINY_MODEL, seed=3).items()}
        leaves = as_leaves(params)
        img = rng.random((2, 8, 8, 1))
        res = forward(img, leaves, TINY_MODEL,
                      interaction=switches.iq, gate_net=switches.gc)
        labels = np.array([0, 2])
        teachers = np.tile(np.full(4, 0.25), (2, 1))
        return res, labels, teachers

    def test_breakdown_sums_exactly(self):
        sw = Switches()
        res, labels, teachers = self._setup(sw)
        loss, bd = total_loss(res.logits, labels, res.trace, teachers, 1e-3, sw)
        assert abs(bd.total - (bd.task + bd.alignment)) <= 1e-9
        np.testing.assert_allclose(float(loss.data), bd.total, atol=1e-9)
        assert bd.alignment >= -1e-9

    def test_constraint_off_total_equals_task(self):
        sw = Switches(ic=False)
        res, labels, teachers = self._setup(sw)
        loss, bd = total_loss(res.logits, labels, res.trace, None, 1e-3, sw)
        assert bd.alignment == 0.0
        assert bd.total == bd.task
        assert float(loss.data) == bd.task

    def test_constraint_without_queries_supervises_visual(self):
        sw = Switches(iq=False, ic=True)
        res, labels, teachers = self._setup(sw)
        loss, bd = total_loss(res.logits, labels, res.trace, teachers, 1e-3, sw)
        ref = alignment_loss(res.trace, teachers, 1e-3, pathway="visual")
        np.testing.assert_allclose(bd.alignment, float(ref.data), atol=1e-12)

    def test_label_out_of_range(self):
        sw = Switches(ic=False)
        res, labels, _ = self._setup(sw)
        with pytest.raises(ValueError, match="label out of range"):
            total_loss(res.logits, np.array([0, 99]), res.trace, None, 1e-3, sw)

    def test_missing_teacher_rejected(self):
        sw = Switches()
        res, labels, _ = self._setup(sw)
        with pytest.raises(ValueError, match="teacher"):
            total_loss(res.logits, labels, res.trace, None, 1e-3, sw)


class TestFinetuneTrainable:
    params = init_params(TINY_MODEL, seed=0)

    def _set(self, sw):
        return {k for k, v in finetune_trainable(self.params, sw).items() if v}

    def test_full_switches(self):
        s = self._set(Switches())
        assert "l0.wq2" in s and "l0.gate_w1" in s and "head_w" in s
        assert "l0.wq" not in s and "patch_w" not in s

    def test_no_gate_keeps_gates_frozen(self):
        s = self._set(Switches(gc=False))
        assert "l0.wq2" in s and "l0.gate_w1" not in s

    def test_constraint_on_original_queries_unfreezes_them(self):
        s = self._set(Switches(iq=False, ic=True))
        assert "l0.wq" in s and "l1.wq" in s and "head_w" in s
        assert "l0.wq2" not in s and "l0.gate_w1" not in s
        assert "l0.wk" not in s and "l0.ffn_w1" not in s

    def test_all_off_trains_everything(self):
        s = self._set(Switches(iq=False, ic=False, gc=False))
        assert s == set(self.params.keys())


class TestTrainLoop:
    def test_zero_lr_leaves_params_bitwise(self):
        cfg = tiny_cfg(train=dict(lr=0.0, epochs=1, stage="pretrain"))
        ds = gen_synthetic(TINY_DATA, seed=0)
        params0 = init_params(TINY_MODEL, seed=0)
        res = train(cfg, params=params0, dataset=ds)
        for k in params0:
            np.testing.assert_array_equal(res.params[k], params0[k])
        assert len(res.history) == 1
        assert res.log_lines  # metrics still logged

    def test_deterministic_log_lines(self):
        cfg = tiny_cfg()
        a = train(cfg, dataset=gen_synthetic(TINY_DATA, seed=0))
        b = train(cfg, dataset=gen_synthetic(TINY_DATA, seed=0))
        assert a.log_lines == b.log_lines

    def test_seed_changes_run(self):
        a = train(tiny_cfg(), dataset=gen_synthetic(TINY_DATA, seed=0))
        b = train(tiny_cfg(train=dict(seed=1)),
                  dataset=gen_synthetic(TINY_DATA, seed=1))
        assert a.log_lines != b.log_lines

    def test_two_stage_structure_and_record_format(self):
        res = train(tiny_cfg(), dataset=gen_synthetic(TINY_DATA, seed=0))
        stages = [r.stage for r in res.history]
        assert stages == ["pretrain", "pretrain", "finetune", "finetune"]
        line = res.history[0].format()
        for key in ("epoch=", "stage=", "steps=", "task=", "align=",
                    "train_acc=", "val_acc=", "g1=", "g2="):
            assert key in line
        # pretrain has no fusion: gates pinned to (0, 1)
        assert res.history[0].g1 == [0.0, 0.0]
        assert res.history[0].g2 == [1.0, 1.0]

    def test_frozen_backbone_constant_through_finetune(self):
        ds = gen_synthetic(TINY_DATA, seed=0)
        pre = train(tiny_cfg(train=dict(stage="pretrain")), dataset=ds)
        ft = train(tiny_cfg(train=dict(stage="finetune", epochs=2)),
                   params=pre.params, dataset=ds)
        for k in pre.params:
            if ".wq2" in k or ".gate_" in k or k in ("head_w", "head_b"):
                continue
            np.testing.assert_array_equal(ft.params[k], pre.params[k])

    def test_gate_logging_with_gc_off(self):
        res = train(tiny_cfg(switches=Switches(gc=False),
                             train=dict(stage="finetune", epochs=1)),
                    dataset=gen_synthetic(TINY_DATA, seed=0))
        assert res.history[0].g1 == [0.5, 0.5]
        assert res.history[0].g2 == [0.5, 0.5]

    def test_checkpoints_and_log_written(self, tmp_path):
        cfg = tiny_cfg(train=dict(epochs=1))
        train(cfg, dataset=gen_synthetic(TINY_DATA, seed=0), out_dir=tmp_path,
              header=["config a = 1"])
        assert (tmp_path / "checkpoint.ivit").is_file()
        assert (tmp_path / "checkpoint_best.ivit").is_file()
        log = (tmp_path / "metrics.log").read_text()
        assert log.startswith("config a = 1\n")
        assert "epoch=1" in log

    def test_stop_at_train_accuracy(self):
        # a zero threshold triggers as soon as the accuracy window fills
        res = train(tiny_cfg(train=dict(stage="pretrain", epochs=5)),
                    dataset=gen_synthetic(TINY_DATA, seed=0),
                    stop_at_train_acc=0.0)
        assert res.steps_to_target is not None
        assert len(res.history) == 1
        assert res.steps_to_target <= res.history[-1].steps


class TestMomentumSGD:
    def test_cosine_schedule_endpoints(self):
        opt = MomentumSGD({"w": True}, lr=1.0, total_steps=10)
        assert opt.current_lr() == pytest.approx(1.0)
        opt.step_count = 10
        assert opt.current_lr() == pytest.approx(0.0, abs=1e-12)

    def test_momentum_accumulation(self):
        opt = MomentumSGD({"w": True}, lr=0.1, total_steps=10 ** 9)
        params = {"w": np.zeros(1, dtype=np.float32)}
        g = {"w": np.ones(1)}
        opt.step(params, g)
        np.testing.assert_allclose(params["w"], -0.1)
        opt.step(params, g)
        np.testing.assert_allclose(params["w"], -0.1 - 0.1 * 1.9, rtol=1e-6)
