import math

import numpy as np
import pytest

from spatialnet_vit.errors import ConfigError, ContractError, ShapeError
from spatialnet_vit.heads import (
    LossReport,
    RegularizationConfig,
    TaskHead,
    TaskSet,
    TaskSpec,
    cross_entropy,
    final_loss,
    head_forward,
    l2_reg,
    mse,
    mtl_loss,
    one_hot,
    task_loss,
)
from spatialnet_vit.tensor import Tensor, backward


def T(x, grad=False):
    return Tensor(np.asarray(x, dtype=float), requires_grad=grad)


def test_task_spec_validation():
    with pytest.raises(ConfigError):
        TaskSpec("c", "classification", 1)
    with pytest.raises(ConfigError):
        TaskSpec("r", "regression", weight=0.0)
    with pytest.raises(ConfigError):
        TaskSpec("x", "ranking")
    with pytest.raises(ConfigError):
        TaskSet([TaskSpec("a", "regression"), TaskSpec("a", "regression")])
    with pytest.raises(ConfigError):
        TaskSet([])
    ts = TaskSet([TaskSpec("a", "classification", 4, 0.5), TaskSpec("b", "regression")])
    assert ts.ids == ["a", "b"] and ts.get("a").outputs == 4 and ts.get("b").outputs == 1
    assert TaskSet.from_list(ts.to_list()) == ts


def test_regularization_weight_nonnegative():
    with pytest.raises(ConfigError):
        RegularizationConfig(-0.1)
    assert RegularizationConfig().weight == 0.01


# -- heads -------------------------------------------------------------------

def test_zero_classifier_is_uniform():
    head = TaskHead(TaskSpec("c", "classification", 4), T(np.zeros((3, 4))), T(np.zeros(4)))
    np.testing.assert_allclose(head_forward(np.ones((5, 3)), head).data, [0.25] * 4)


def test_zero_regressor_returns_bias():
    head = TaskHead(TaskSpec("r", "regression"), T(np.zeros((3, 1))), T([5.0]))
    out = head_forward(np.ones((5, 3)), head)
    assert out.shape == () and out.item() == 5.0


def test_head_matches_pool_matmul_softmax(rng):
    z, w, b = rng.normal(size=(2, 6, 3)), rng.normal(size=(3, 4)), rng.normal(size=4)
    head = TaskHead(TaskSpec("c", "classification", 4), T(w), T(b))
    logits = z.mean(axis=1) @ w + b
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    np.testing.assert_allclose(head_forward(z, head).data, e / e.sum(axis=1, keepdims=True), rtol=1e-12)


def test_head_dimension_mismatch():
    head = TaskHead(TaskSpec("r", "regression"), T(np.zeros((3, 1))), T([0.0]))
    with pytest.raises(ShapeError):
        head_forward(np.ones((5, 4)), head)


# -- losses ------------------------------------------------------------------

def test_cross_entropy_examples():
    assert cross_entropy([0.25] * 4, one_hot(2, 4)).item() == pytest.approx(1.386294, abs=1e-6)
    assert cross_entropy([0.7, 0.2, 0.1], one_hot(0, 3)).item() == pytest.approx(0.356675, abs=1e-6)
    assert cross_entropy([0.0, 1.0, 0.0], one_hot(1, 3)).item() == pytest.approx(0.0, abs=1e-11)


def test_cross_entropy_clamps_zero_probability():
    assert cross_entropy([1.0, 0.0], one_hot(1, 2)).item() == pytest.approx(-math.log(1e-12))


def test_cross_entropy_rejects_non_one_hot():
    with pytest.raises(ContractError):
        cross_entropy([0.5, 0.5], [0.5, 0.5])
    with pytest.raises(ContractError):
        cross_entropy([0.5, 0.5], [1.0, 1.0])


def test_cross_entropy_batch_mean():
    p = np.array([[0.25] * 4, [0.7, 0.1, 0.1, 0.1]])
    y = one_hot([3, 0], 4)
    want = (math.log(4) - math.log(0.7)) / 2
    assert cross_entropy(p, y).item() == pytest.approx(want, rel=1e-10)


def test_mse_examples(rng):
    assert mse([0.0, 0.0], [3.0, 4.0]).item() == 12.5
    assert mse([1.5, -2.0], [1.5, -2.0]).item() == 0.0
    a, b = rng.normal(size=7), rng.normal(size=7)
    assert mse(a, b).item() == pytest.approx(sum((x - y) ** 2 for x, y in zip(a, b)) / 7, rel=1e-12)
    with pytest.raises(ShapeError):
        mse([1.0, 2.0], [1.0])


def test_mtl_loss_examples():
    two = TaskSet([TaskSpec("a", "regression"), TaskSpec("b", "regression")])
    assert mtl_loss({"a": 0.5, "b": 0.25}, two) == 0.75
    one = TaskSet([TaskSpec("a", "regression", weight=2.0)])
    assert mtl_loss({"a": 0.3}, one) == pytest.approx(0.6)
    three = TaskSet([TaskSpec("a", "regression", weight=0.5), TaskSpec("b", "regression", weight=1.5),
                     TaskSpec("c", "regression", weight=1.0)])
    assert mtl_loss({"a": 1.0, "b": 1.0, "c": 1.0}, three) == 3.0
    with pytest.raises(ContractError):
        mtl_loss({"a": 1.0}, two)


def test_l2_reg_examples(rng):
    assert l2_reg([T(np.zeros((2, 3))), T(np.zeros(4))]).item() == 0.0
    assert l2_reg([T([3.0, 4.0])]).item() == 12.5
    from spatialnet_vit.encoder import preset_config
    from spatialnet_vit.model import SpatialNetViT

    model = SpatialNetViT(preset_config("desk"), TaskSet([TaskSpec("r", "regression")]), seed=2)
    dump = [float(x) for arr in model.state_dict().values() for x in arr.ravel()]
    assert l2_reg(model.params).item() == pytest.approx(0.5 * sum(x * x for x in dump), rel=1e-12)


TWO = TaskSet([TaskSpec("class", "classification", 4), TaskSpec("count", "regression")])


def test_final_loss_zero_reg_equals_mtl(rng):
    preds = {"class": T(np.full((3, 4), 0.25)), "count": T([1.0, 2.0, 0.0])}
    targets = {"class": [0, 1, 2], "count": [1.0, 1.0, 1.0]}
    rep = final_loss(preds, targets, TWO, 0.0, [T(rng.normal(size=5))])
    assert rep.final.item() == rep.mtl.item()


def test_final_loss_uniform_classifier():
    tasks = TaskSet([TaskSpec("c", "classification", 4)])
    rep = final_loss({"c": T(np.full((2, 4), 0.25))}, {"c": [1, 3]}, tasks, 0.01, [T(np.zeros(6))])
    assert rep.final.item() == pytest.approx(math.log(4), abs=1e-9)


def test_final_loss_composition():
    # L_MTL = 1.0 from a single regression task, L_reg = 12.5 from theta = [3, 4]
    tasks = TaskSet([TaskSpec("r", "regression")])
    rep = final_loss({"r": T([1.0, -1.0])}, {"r": [0.0, 0.0]}, tasks, RegularizationConfig(0.01),
                     [T([3.0, 4.0])])
    assert rep.mtl.item() == 1.0 and rep.reg.item() == 12.5
    assert rep.final.item() == pytest.approx(1.125, abs=1e-12)
    assert rep.as_floats() == {"task/r": 1.0, "mtl": 1.0, "reg": 12.5, "final": rep.final.item()}
    assert isinstance(rep, LossReport)


def test_final_loss_empty_batch():
    tasks = TaskSet([TaskSpec("r", "regression")])
    with pytest.raises(ContractError):
        final_loss({"r": T(np.zeros(0))}, {"r": []}, tasks, 0.01, [])


def test_missing_labels_are_excluded():
    task = TaskSpec("r", "regression")
    loss, n = task_loss(T([1.0, 5.0, 3.0]), [0.0, np.nan, 3.0], task)
    assert n == 2 and loss.item() == 0.5
    loss, n = task_loss(T([1.0]), [np.nan], task)
    assert n == 0 and loss.item() == 0.0


def test_final_loss_gradient_flows_to_predictions():
    p = T([0.5, 1.5], grad=True)
    rep = final_loss({"r": p}, {"r": [0.0, 1.0]}, TaskSet([TaskSpec("r", "regression")]), 0.0, [])
    (g,) = backward(rep.final, [p])
    np.testing.assert_allclose(g, [0.5, 0.5])


def test_bad_class_label():
    with pytest.raises(ContractError):
        task_loss(T(np.full((1, 3), 1 / 3)), [3.0], TaskSpec("c", "classification", 3))
