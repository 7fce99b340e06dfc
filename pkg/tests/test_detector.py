import numpy as np
import pytest
import torch

from sfattack.dataset import generate_dataset
from sfattack.detector import (
    Detection,
    DetectorConfig,
    DetectorModel,
    DetectorOutput,
    assign_anchors,
    encode_boxes,
    forward,
    image_to_tensor,
    load_checkpoint,
    postprocess,
    save_checkpoint,
    tensor_to_image,
    train,
)
from sfattack.losses import cls_loss, freq_loss, loc_loss, normalize_boxes
from sfattack.wavelet import ShapeError

REDUCED = DetectorConfig(image_size=8, stride=4, k_classes=2, in_channels=1, base_channels=8)


def reduced_model(seed=3):
    torch.manual_seed(seed)
    model = DetectorModel(REDUCED).double()
    model.eval()
    return model


def test_config_validation():
    with pytest.raises(ValueError):
        DetectorConfig(stride=3)
    with pytest.raises(ValueError):
        DetectorConfig(image_size=100, stride=16)
    with pytest.raises(ValueError):
        DetectorConfig(k_classes=0)
    with pytest.raises(ValueError):
        DetectorConfig(anchor_scales=())


def test_candidate_count_formula():
    cfg = DetectorConfig()
    assert cfg.num_candidates == (128 // 16) ** 2
    two = DetectorConfig(anchor_scales=(1.5, 2.5))
    assert two.num_candidates == 2 * 64


def test_anchor_layout():
    torch.manual_seed(0)
    model = DetectorModel(DetectorConfig())
    anchors = model.anchors_center
    assert anchors.shape == (64, 4)
    # first cell center, row-major order, 28x28 anchors (1.75 x stride)
    assert anchors[0].tolist() == [8.0, 8.0, 28.0, 28.0]
    assert anchors[1].tolist() == [24.0, 8.0, 28.0, 28.0]
    assert anchors[8].tolist() == [8.0, 24.0, 28.0, 28.0]
    corners = model.anchor_boxes()
    assert corners[0].tolist() == [-6.0, -6.0, 22.0, 22.0]


def test_forward_output_contract():
    torch.manual_seed(1)
    model = DetectorModel(DetectorConfig())
    model.eval()
    for _ in range(5):
        image = torch.rand(3, 128, 128)
        out = model(image)
        assert isinstance(out, DetectorOutput)
        assert out.boxes.shape == (64, 4)
        assert out.probs.shape == (64, 4)
        assert torch.all(out.probs >= 0) and torch.all(out.probs <= 1)
        assert torch.allclose(out.probs.sum(dim=1), torch.ones(64), atol=1e-5)


def test_forward_is_deterministic():
    model = reduced_model()
    image = torch.zeros(1, 8, 8, dtype=torch.float64)
    a = model(image)
    b = model(image)
    assert torch.equal(a.boxes, b.boxes)
    assert torch.equal(a.probs, b.probs)


def test_forward_rejects_wrong_size():
    model = reduced_model()
    with pytest.raises(ShapeError):
        model(torch.zeros(1, 8, 10, dtype=torch.float64))
    with pytest.raises(ShapeError):
        model(torch.zeros(3, 8, 8, dtype=torch.float64))


def test_module_level_forward_delegates():
    model = reduced_model()
    image = torch.rand(1, 8, 8, dtype=torch.float64)
    a = forward(model, image)
    b = model(image)
    assert torch.equal(a.boxes, b.boxes)


def _max_rel_err(model, x, scalar_of_output, step=1e-3):
    xg = x.clone().requires_grad_()
    scalar_of_output(model(xg)).backward()
    grad = xg.grad.clone()
    worst = 0.0
    for i in range(x.shape[1]):
        for j in range(x.shape[2]):
            plus = x.clone()
            plus[0, i, j] += step
            minus = x.clone()
            minus[0, i, j] -= step
            fd = (scalar_of_output(model(plus)) - scalar_of_output(model(minus))).item() / (2 * step)
            a = grad[0, i, j].item()
            worst = max(worst, abs(fd - a) / max(abs(fd), abs(a), 1e-8))
    return worst


def test_background_score_gradient_matches_finite_differences():
    model = reduced_model()
    torch.manual_seed(7)
    x = torch.rand(1, 8, 8, dtype=torch.float64)
    err = _max_rel_err(model, x, lambda out: out.probs[:, REDUCED.k_classes].sum())
    assert err < 1e-4


def test_attack_loss_gradients_match_finite_differences():
    # each loss from the losses module, composed with the detector forward
    model = reduced_model(seed=5)
    torch.manual_seed(11)
    x = torch.rand(1, 8, 8, dtype=torch.float64)

    def loc_scalar(out):
        boxes = normalize_boxes(out.boxes[:2], height=8, width=8)
        return loc_loss(boxes, torch.zeros(2, 4, dtype=torch.float64))

    def cls_scalar(out):
        return cls_loss(out.probs[:3], [0, 1, 0])

    assert _max_rel_err(model, x, loc_scalar) < 1e-4
    assert _max_rel_err(model, x, cls_scalar) < 1e-4

    # frequency term does not involve the detector but shares the pipeline
    xg = x.clone().requires_grad_()
    freq_loss(x, xg)[2].backward()
    assert torch.isfinite(xg.grad).all()


def test_decode_encode_round_trip():
    model = reduced_model()
    torch.manual_seed(2)
    offsets = torch.randn(REDUCED.num_candidates, 4, dtype=torch.float64)
    boxes = model.decode_boxes(offsets)
    recovered = encode_boxes(model.anchors_center.double(), boxes)
    assert torch.allclose(recovered, offsets, atol=1e-9)


def test_assign_anchors_hand_case():
    torch.manual_seed(0)
    model = DetectorModel(DetectorConfig())
    corners = model.anchor_boxes().numpy()

    class Obj:
        def __init__(self, box, label):
            self.box = box
            self.label = label

    # object exactly on the anchor at cell (0,0): IoU 1 -> positive there
    on_anchor = Obj((-8.0, -8.0, 24.0, 24.0), 1)
    cls_t, matched = assign_anchors(corners, [on_anchor], k_classes=3)
    assert cls_t[0] == 1 and matched[0] == 0
    # far-away cells are background
    assert cls_t[63] == 3 and matched[63] == -1


def test_assign_anchors_forces_best_anchor_for_awkward_objects():
    torch.manual_seed(0)
    model = DetectorModel(DetectorConfig())
    corners = model.anchor_boxes().numpy()

    class Obj:
        def __init__(self, box, label):
            self.box = box
            self.label = label

    # a small box centered between cells clears no 0.5-IoU threshold with
    # any 28x28 anchor, yet must still be represented by its best anchor
    small = Obj((12.0, 12.0, 28.0, 28.0), 2)
    cls_t, matched = assign_anchors(corners, [small], k_classes=3)
    positives = np.flatnonzero(matched >= 0)
    assert len(positives) >= 1
    assert all(cls_t[p] == 2 for p in positives)


def test_assign_anchors_empty_ground_truth_all_background():
    torch.manual_seed(0)
    model = DetectorModel(DetectorConfig())
    cls_t, matched = assign_anchors(model.anchor_boxes().numpy(), [], k_classes=3)
    assert np.all(cls_t == 3)
    assert np.all(matched == -1)


def test_train_zero_epochs_is_a_no_op():
    model = reduced_model()
    before = {k: v.clone() for k, v in model.state_dict().items()}
    history = train(model, [], epochs=0)
    assert history == {"train_loss": [], "val_map50": []}
    for k, v in model.state_dict().items():
        assert torch.equal(before[k], v)


def test_train_rejects_empty_training_set():
    model = reduced_model()
    with pytest.raises(ValueError):
        train(model, [], epochs=1)


def test_training_learns_and_loss_trends_down():
    scenes = generate_dataset(seed=31, n_scenes=60)
    torch.manual_seed(0)
    model = DetectorModel(DetectorConfig())
    history = train(model, scenes, epochs=10, lr=2e-3, seed=0)
    losses = history["train_loss"]
    assert len(losses) == 10
    # non-increasing through a 5-epoch smoothing window
    smoothed = [sum(losses[i : i + 5]) / 5 for i in range(len(losses) - 4)]
    assert all(b <= a + 1e-9 for a, b in zip(smoothed, smoothed[1:]))
    assert losses[-1] < losses[0]


def test_training_is_deterministic():
    scenes = generate_dataset(seed=33, n_scenes=12)
    states = []
    for _ in range(2):
        torch.manual_seed(4)
        model = DetectorModel(DetectorConfig())
        train(model, scenes, epochs=2, lr=1e-3, seed=4)
        states.append({k: v.clone() for k, v in model.state_dict().items()})
    for k in states[0]:
        assert torch.equal(states[0][k], states[1][k])


def _output(boxes, probs):
    return DetectorOutput(boxes=torch.tensor(boxes, dtype=torch.float64),
                          probs=torch.tensor(probs, dtype=torch.float64))


def test_postprocess_empty_when_nothing_clears_threshold():
    out = _output([[0, 0, 10, 10]], [[0.2, 0.2, 0.6]])  # background argmax
    assert postprocess(out) == []
    out = _output([[0, 0, 10, 10]], [[0.4, 0.3, 0.3]])  # score below 0.5
    assert postprocess(out) == []


def test_postprocess_suppresses_exact_duplicates():
    out = _output(
        [[0, 0, 10, 10], [0, 0, 10, 10]],
        [[0.9, 0.05, 0.05], [0.8, 0.1, 0.1]],
    )
    kept = postprocess(out, score_threshold=0.5, nms_iou=0.5)
    assert len(kept) == 1
    assert kept[0].score == pytest.approx(0.9)
    assert kept[0].label == 0


def test_postprocess_keeps_distinct_classes_apart():
    out = _output(
        [[0, 0, 10, 10], [0, 0, 10, 10]],
        [[0.9, 0.05, 0.05], [0.05, 0.9, 0.05]],
    )
    kept = postprocess(out)
    assert {d.label for d in kept} == {0, 1}


def test_postprocess_three_box_hand_case():
    # pairwise IoUs: (a,b) 0.6, (a,c) ~0.2, (b,c) ~0.1 -> b suppressed by a
    a = [0.0, 0.0, 10.0, 10.0]
    b = [0.0, 2.5, 10.0, 12.5]
    c = [7.0, 7.0, 17.0, 17.0]
    out = _output([a, b, c], [[0.9, 0.0, 0.1], [0.8, 0.0, 0.2], [0.7, 0.0, 0.3]])
    kept = postprocess(out, score_threshold=0.5, nms_iou=0.5)
    assert [d.score for d in kept] == pytest.approx([0.9, 0.7])


def brute_force_nms(boxes, labels, scores, threshold, nms_iou):
    def ref_iou(p, q):
        ix = max(0.0, min(p[2], q[2]) - max(p[0], q[0]))
        iy = max(0.0, min(p[3], q[3]) - max(p[1], q[1]))
        inter = ix * iy
        union = (p[2] - p[0]) * (p[3] - p[1]) + (q[2] - q[0]) * (q[3] - q[1]) - inter
        return inter / union if union > 0 else 0.0

    kept = []
    for label in set(labels):
        pool = sorted(
            (i for i in range(len(boxes)) if labels[i] == label and scores[i] >= threshold),
            key=lambda i: (-scores[i], i),
        )
        chosen = []
        for i in pool:
            if all(ref_iou(boxes[i], boxes[j]) <= nms_iou for j in chosen):
                chosen.append(i)
        kept.extend(chosen)
    return sorted(kept, key=lambda i: -scores[i])


def test_postprocess_matches_brute_force_oracle():
    rng = np.random.default_rng(77)
    for _ in range(100):
        n = int(rng.integers(1, 20))
        xy = rng.uniform(0, 80, size=(n, 2))
        wh = rng.uniform(5, 40, size=(n, 2))
        boxes = np.concatenate([xy, xy + wh], axis=1)
        probs = rng.dirichlet(np.ones(4), size=n)
        out = _output(boxes, probs)
        kept = postprocess(out, score_threshold=0.3, nms_iou=0.4)

        argmax = probs.argmax(axis=1)
        fg = [i for i in range(n) if argmax[i] != 3]
        want = brute_force_nms(
            [boxes[i] for i in fg],
            [int(argmax[i]) for i in fg],
            [float(probs[i, argmax[i]]) for i in fg],
            0.3,
            0.4,
        )
        got = {(d.label, round(d.score, 12)) for d in kept}
        expected = {(int(argmax[fg[i]]), round(float(probs[fg[i], argmax[fg[i]]]), 12)) for i in want}
        assert got == expected


def test_postprocess_validates_thresholds():
    out = _output([[0, 0, 1, 1]], [[0.9, 0.05, 0.05]])
    with pytest.raises(ValueError):
        postprocess(out, score_threshold=1.5)
    with pytest.raises(ValueError):
        postprocess(out, nms_iou=-0.1)


def test_checkpoint_round_trip(tmp_path):
    model = reduced_model().float()
    path = tmp_path / "model.pt"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    assert loaded.config == model.config
    image = torch.rand(1, 8, 8)
    a = model(image)
    b = loaded(image)
    assert torch.allclose(a.boxes, b.boxes)
    assert torch.allclose(a.probs, b.probs)


def test_checkpoint_missing_file():
    with pytest.raises(FileNotFoundError):
        load_checkpoint("/nonexistent/model.pt")


def test_image_tensor_round_trip():
    image = np.random.default_rng(0).random((16, 16, 3)).astype(np.float32)
    tensor = image_to_tensor(image)
    assert tensor.shape == (3, 16, 16)
    back = tensor_to_image(tensor)
    assert np.array_equal(back, image)
