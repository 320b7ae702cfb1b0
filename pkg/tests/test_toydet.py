import numpy as np
import pytest

from oracles import central_difference_gradient
from wsdet.dataset import SplitDataset, SyntheticConfig, generate_synthetic, split_partial
from wsdet.ema import FROZEN_BN, OPEN_BN, NormStrategy, ParameterState
from wsdet.fusion import Detection
from wsdet.geometry import BoundingBox
from wsdet.toydet import (
    GridDetector,
    LossBreakdown,
    TrainConfig,
    assign_targets,
    batch_loss_and_grad,
    init_detector,
    predict,
    student_step,
    supervised_loss,
    train,
    weak_loss,
)

FHAT_UNIT = 1.0 / np.sqrt(1.0 + 1e-5)  # normalized value of a unit feature at init stats


def ones_image(det):
    return np.ones((det.grid_h, det.grid_w, det.feature_dim))


def set_theta(det, theta):
    return det.with_params(
        ParameterState(theta, det.params.norm_mean, det.params.norm_var)
    )


def anchor_box(det, cell):
    a = det.anchors()[cell]
    return BoundingBox(*a)


def gt(box):
    return Detection(1.0, box, "ground-truth")


def small_random_setup(seed, grid=(2, 3), fd=3):
    """Random detector, feature grid and plausible labels for gradient checks."""
    rng = np.random.default_rng(seed)
    det = init_detector(grid[0], grid[1], fd, 16.0, 24.0, rng, init_scale=0.5)
    image = rng.uniform(-1, 1, size=(grid[0], grid[1], fd))
    labels = []
    anchors = det.anchors()
    for c in rng.choice(det.n_cells, size=2, replace=False):
        x0, y0, x1, y1 = anchors[c]
        jit = rng.uniform(-1.5, 1.5, size=2)
        labels.append(gt(BoundingBox(
            max(0.0, x0 + jit[0]), max(0.0, y0 + jit[1]),
            x1 + abs(rng.uniform(0, 1.5)) + 0.5, y1 + abs(rng.uniform(0, 1.5)) + 0.5,
        )))
    return det, image, labels


# ---------------------------------------------------------------------------
# construction and prediction

def test_theta_length_validated():
    with pytest.raises(ValueError, match="theta"):
        GridDetector(2, 2, 3, 16, 16, ParameterState(np.zeros(10), np.zeros(3), np.ones(3)))


def test_zero_parameters_score_half_everywhere():
    det = init_detector(2, 2, 3, 16, 16)
    from wsdet.toydet import _forward, _sigmoid

    _, logits, _ = _forward(det, ones_image(det))
    assert np.all(_sigmoid(logits) == 0.5)
    # threshold is strict: score == threshold emits nothing
    assert predict(det, ones_image(det), score_thresh=0.5) == []


def test_zero_regression_decodes_to_anchor():
    det = init_detector(2, 2, 1, 16, 16)
    theta = np.zeros(det.n_cells * 5)
    theta[: det.n_cells] = 10.0  # confident everywhere, offsets zero
    det = set_theta(det, theta)
    dets = predict(det, ones_image(det), score_thresh=0.5, tau_nms=1.0)
    assert len(dets) == 4
    boxes = sorted(d.box.to_list() for d in dets)
    anchors = sorted(a.tolist() for a in det.anchors())
    assert boxes == anchors


def test_hand_set_single_confident_cell():
    det = init_detector(2, 2, 1, 16, 16)
    theta = np.zeros(det.n_cells * 5)
    theta[:4] = np.log(1 / 99) / FHAT_UNIT  # every cell near 0.01
    theta[1] = np.log(99) / FHAT_UNIT       # cell (0, 1) near 0.99
    det = set_theta(det, theta)
    dets = predict(det, ones_image(det), score_thresh=0.5)
    assert len(dets) == 1
    assert dets[0].score == pytest.approx(0.99, abs=1e-9)
    assert dets[0].box == anchor_box(det, 1)


def test_shape_mismatch_rejected():
    det = init_detector(2, 2, 3, 16, 16)
    with pytest.raises(ValueError, match="shape"):
        predict(det, np.ones((2, 3, 3)))


# ---------------------------------------------------------------------------
# target assignment

def test_assignment_by_iou_threshold():
    det = init_detector(2, 2, 1, 16, 16)
    y, t = assign_targets(det, [anchor_box(det, 3)], match_iou=0.2)
    assert y.tolist() == [0.0, 0.0, 0.0, 1.0]
    assert np.allclose(t[3], 0.0)  # the anchor is its own target


def test_low_iou_label_still_force_matched():
    det = init_detector(2, 2, 1, 16, 16)
    tiny = BoundingBox(0.0, 0.0, 1.5, 1.5)  # IoU with an 8x8 anchor ~ 0.035
    y, _ = assign_targets(det, [tiny], match_iou=0.2)
    assert y.tolist() == [1.0, 0.0, 0.0, 0.0]


def test_no_labels_no_positives():
    det = init_detector(2, 2, 1, 16, 16)
    y, t = assign_targets(det, [], match_iou=0.2)
    assert not y.any() and not t.any()


# ---------------------------------------------------------------------------
# losses

def test_perfect_predictor_has_zero_loss():
    det = init_detector(2, 2, 1, 16, 16)
    label = anchor_box(det, 0)
    theta = np.zeros(det.n_cells * 5)
    theta[:4] = -40.0 / FHAT_UNIT
    theta[0] = 40.0 / FHAT_UNIT
    det = set_theta(det, theta)  # target offsets are zero, reg weights zero
    loss = supervised_loss(det, ones_image(det), [gt(label)])
    assert loss.total == pytest.approx(0.0, abs=1e-8)


def test_all_negative_agreement_has_zero_loss():
    det = init_detector(2, 2, 1, 16, 16)
    theta = np.zeros(det.n_cells * 5)
    theta[:4] = -40.0 / FHAT_UNIT  # scores ~ 0 everywhere
    det = set_theta(det, theta)
    loss = supervised_loss(det, ones_image(det), [])
    assert loss.total == pytest.approx(0.0, abs=1e-8)
    assert loss.reg_rpn == 0.0 and loss.reg_roi == 0.0


def test_single_uncertain_cell_contributes_log2_per_head():
    det = init_detector(2, 2, 1, 16, 16)
    theta = np.zeros(det.n_cells * 5)
    theta[:4] = -40.0 / FHAT_UNIT
    theta[2] = 0.0  # logit 0 -> score 0.5 on a negative cell
    det = set_theta(det, theta)
    loss = supervised_loss(det, ones_image(det), [])
    assert loss.cls_rpn == pytest.approx(np.log(2), abs=1e-8)
    assert loss.cls_roi == pytest.approx(np.log(2), abs=1e-8)


def test_breakdown_total_is_component_sum():
    lb = LossBreakdown(1.0, 0.25, 1.0, 0.25)
    assert lb.total == 2.5
    both = lb + LossBreakdown.zero()
    assert both.total == lb.total


def test_weak_loss_identical_to_supervised():
    for seed in range(10):
        det, image, labels = small_random_setup(seed)
        sup = supervised_loss(det, image, labels)
        wek = weak_loss(det, image, labels)
        assert sup == wek  # bitwise: same code path, same targets


def test_empty_pseudo_set_with_silent_detector_is_zero_loss():
    det = init_detector(2, 2, 1, 16, 16)
    theta = np.zeros(det.n_cells * 5)
    theta[:4] = -40.0 / FHAT_UNIT
    det = set_theta(det, theta)
    assert weak_loss(det, ones_image(det), []).total == pytest.approx(0.0, abs=1e-8)


def test_reference_defaults():
    cfg = TrainConfig()
    assert cfg.lambda_weak == 0.25
    assert cfg.alpha == 0.999
    assert cfg.tau_nms == 0.2
    assert cfg.cam_epochs == 2
    assert cfg.match_iou == 0.2
    assert cfg.eval_iou_thresh == 0.2
    assert cfg.pseudo_score_thresh == 0.5
    assert cfg.cam_tau == 0.5
    assert cfg.norm.kind == "frozen"


# ---------------------------------------------------------------------------
# gradients and the descent step

def test_gradient_matches_finite_differences():
    for seed in range(5):
        det, image, labels = small_random_setup(seed)
        _, grad = batch_loss_and_grad(det, [(image, labels)])

        def loss_at(theta, det=det, image=image, labels=labels):
            moved = set_theta(det, theta)
            return supervised_loss(moved, image, labels).total

        fd = central_difference_gradient(loss_at, det.params.theta.copy())
        denom = np.maximum(np.maximum(np.abs(grad), np.abs(fd)), 1e-4)
        assert (np.abs(grad - fd) / denom).max() < 1e-4


def test_lambda_zero_equals_dropping_weak_batch():
    det, image, labels = small_random_setup(42)
    _, image2, pseudo = small_random_setup(43)
    stepped_with = student_step(det, [(image, labels)], [(image2, pseudo)],
                                lambda_weak=0.0, lr=0.1)
    stepped_without = student_step(det, [(image, labels)], [], lambda_weak=0.0, lr=0.1)
    assert np.array_equal(stepped_with.params.theta, stepped_without.params.theta)


def test_step_moves_against_gradient():
    det, image, labels = small_random_setup(7)
    before = supervised_loss(det, image, labels).total
    stepped = student_step(det, [(image, labels)], [], lambda_weak=0.25, lr=0.01)
    after = supervised_loss(stepped, image, labels).total
    assert after < before


def test_non_finite_loss_aborts():
    det, image, labels = small_random_setup(3)
    huge = set_theta(det, det.params.theta * 1e200)
    with pytest.raises(RuntimeError, match="non-finite"):
        student_step(huge, [(image * 1e200, labels)], [], 0.25, 0.1)


def test_negative_lambda_rejected():
    det, image, labels = small_random_setup(5)
    with pytest.raises(ValueError):
        student_step(det, [(image, labels)], [], lambda_weak=-1.0, lr=0.1)


# ---------------------------------------------------------------------------
# training loop

TINY_SYN = SyntheticConfig(image_h=32, image_w=32, grid_h=4, grid_w=4,
                           max_blobs=2, min_separation=12.0, margin=7.0)


def tiny_data(seed=0, n=12, ratio=0.5):
    records = generate_synthetic(n, seed=seed, config=TINY_SYN)
    split = split_partial(records, ratio=ratio, seed=seed + 1)
    test = generate_synthetic(6, seed=seed + 2, config=TINY_SYN)
    return split, test


def tiny_config(**overrides):
    base = dict(epochs=2, steps_per_epoch=4, batch_full=2, batch_weak=2,
                lr=0.05, alpha=0.9, cam_epochs=1, seed=5)
    base.update(overrides)
    return TrainConfig(**base)


def test_zero_epochs_is_a_no_op():
    split, test = tiny_data()
    report = train(tiny_config(epochs=0), split, test)
    assert report.epochs == []
    assert report.final is None
    assert np.array_equal(report.teacher.theta, report.student.theta)
    assert np.array_equal(report.teacher.norm_mean, np.zeros(14))
    assert np.array_equal(report.teacher.norm_var, np.ones(14))


def test_train_is_deterministic():
    split, test = tiny_data()
    r1 = train(tiny_config(), split, test)
    r2 = train(tiny_config(), split, test)
    assert r1.to_dict() == r2.to_dict()
    assert np.array_equal(r1.teacher.theta, r2.teacher.theta)
    assert np.array_equal(r1.student.theta, r2.student.theta)


def test_frozen_norm_stats_never_move():
    split, test = tiny_data()
    report = train(tiny_config(norm=NormStrategy(kind=FROZEN_BN)), split, test)
    for state in (report.teacher, report.student):
        assert np.array_equal(state.norm_mean, np.zeros(14))
        assert np.array_equal(state.norm_var, np.ones(14))


def test_open_norm_stats_move_student_only():
    split, test = tiny_data()
    report = train(tiny_config(norm=NormStrategy(kind=OPEN_BN)), split, test)
    assert np.array_equal(report.teacher.norm_mean, np.zeros(14))
    assert np.array_equal(report.teacher.norm_var, np.ones(14))
    assert not np.array_equal(report.student.norm_mean, np.zeros(14))


def test_report_carries_per_epoch_curves():
    split, test = tiny_data()
    report = train(tiny_config(epochs=3), split, test)
    assert [row["epoch"] for row in report.epochs] == [0, 1, 2]
    for row in report.epochs:
        for key in ("loss_sup", "loss_weak", "loss_total", "map", "recall_at_0.5_fppi"):
            assert key in row
    assert report.final["map"] == report.epochs[-1]["map"]


def test_loss_non_increasing_on_separable_single_image():
    # one fully-annotated image, small lr: the curve may wobble transiently
    # but never by more than 5%, and must end below its start
    records = generate_synthetic(1, seed=9, config=TINY_SYN)
    while not records[0].boxes:  # need a non-empty image
        records = generate_synthetic(1, seed=10, config=TINY_SYN)
    split = SplitDataset(fully=records, weakly=[], protocol="full")
    cfg = TrainConfig(epochs=15, steps_per_epoch=4, batch_full=1, batch_weak=1,
                      lr=0.01, weak_enabled=False, eval_model="student", seed=1)
    report = train(cfg, split, records)
    losses = [row["loss_sup"] for row in report.epochs]
    for prev, cur in zip(losses, losses[1:]):
        assert cur <= prev * 1.05
    assert losses[-1] < losses[0]


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=-1)
    with pytest.raises(ValueError):
        TrainConfig(alpha=1.0)
    with pytest.raises(ValueError):
        TrainConfig(eval_model="oracle")
