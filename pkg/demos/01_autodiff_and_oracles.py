"""Tour of the tensor core: a tiny reverse-mode graph, a finite-difference
check, a Hungarian match and an AP evaluation on hand-made boxes.

Runs in a few seconds.
"""
import numpy as np

from promptdet import tensor as T
from promptdet.gradcheck import grad_check
from promptdet.matching import hungarian_match
from promptdet.oracles import run_grad_checks
from promptdet.shapes import evaluate_ap

# A scalar function of two leaves, differentiated by hand and by the tape.
x = T.tensor(np.array([0.5, -1.0, 2.0]), requires_grad=True)
w = T.tensor(np.array([1.5, 0.25, -0.75]), requires_grad=True)
y = T.sum(T.sigmoid(x * w) ** 2)
T.backward(y)
print("y =", float(y.data))
print("dy/dx =", x.grad)

with T.precision(np.float64):
    a = T.tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
    err = grad_check(lambda: T.sum(T.softmax(a, axis=-1) * T.tanh(a)), [a])
print(f"softmax*tanh max relative error {err:.2e}")

# The same oracle over a few named cases (the CLI's grad-check runs all of them).
for name, res in run_grad_checks(["layer_norm", "bilinear_sample", "x_mha"], seeds=1).items():
    print(f"  {name:16s} {res['error']:.1e}  {'ok' if res['passed'] else 'FAILED'}")

# Matching picks the cheapest one-to-one assignment.
cost = np.array([[4.0, 1.0, 3.0], [2.0, 0.0, 5.0], [3.0, 2.0, 2.0]])
m = hungarian_match(cost)
print("assignment", m.as_dict(), "cost", m.total_cost)

# AP: one perfect detection and one low-scoring false positive.
gts = [{"boxes": np.array([[0.0, 0.0, 10.0, 10.0]]), "class_ids": np.array([0])}]
preds = [{"boxes": np.array([[0.0, 0.0, 10.0, 10.0], [30.0, 30.0, 40.0, 40.0]]),
          "class_ids": np.array([0, 0]), "scores": np.array([0.9, 0.3])}]
print("AP", evaluate_ap(preds, gts)["mean"])
