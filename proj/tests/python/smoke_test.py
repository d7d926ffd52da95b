"""Smoke tests for the synthkd python module.

Plain asserts, no test-framework dependency; run with PYTHONPATH pointing at
the built package directory.
"""

import math
import os
import tempfile

import numpy as np

import synthkd


def test_kd_loss_worked_value():
    want = (math.e - 1.0) / (math.e + 1.0)
    got = synthkd.kd_loss(np.array([1.0, 0.0]), np.array([0.0, 1.0]), tau=1.0)
    assert abs(got - want) < 1e-12, got
    assert synthkd.kd_loss(np.array([3.0, -1.0]), np.array([3.0, -1.0]), tau=7.0) < 1e-12


def test_hard_label_loss():
    got = synthkd.hard_label_loss(np.zeros(10), [0])
    assert abs(got - math.log(10.0)) < 1e-12, got


def test_guided_noise_identity():
    c = np.random.RandomState(0).randn(4, 4)
    u = np.random.RandomState(1).randn(4, 4)
    assert np.array_equal(synthkd.guided_noise(c, u, 1.0), c)
    out = synthkd.guided_noise(c, u, 3.0)
    assert np.allclose(out, u + 3.0 * (c - u))


def test_schedule_monotone():
    s = synthkd.make_schedule()
    ab = s.alpha_bar
    assert s.t_train == 400
    assert np.all(np.diff(ab) < 0)
    assert ab[-1] < 0.01
    assert len(s.digest()) == 64


def test_forward_noise_plugin():
    s = synthkd.make_schedule(2, 0.5, 0.5000000001)
    x0 = np.ones((1, 1, 16, 16))
    eps = np.zeros((1, 1, 16, 16))
    xt = synthkd.forward_noise(x0, 2, eps, s)
    assert np.allclose(xt, 0.5), xt.ravel()[:3]


def test_toy_dataset_and_classifier():
    train, test = synthkd.generate_toy(num_classes=4, per_class_train=8, per_class_test=4,
                                       seed=3)
    assert len(train) == 32 and len(test) == 16
    imgs = train.images()
    assert imgs.shape == (32, 1, 16, 16)
    assert imgs.min() >= -1.0 and imgs.max() <= 1.0

    model = synthkd.Classifier("S", 4, seed=5)
    logits = model.forward(imgs[:6])
    assert logits.shape == (6, 4)
    assert synthkd.Classifier("S", 4).parameter_count() < \
        synthkd.Classifier("M", 4).parameter_count() < \
        synthkd.Classifier("L", 4).parameter_count()


def test_denoiser_zero_init_and_generation_roundtrip():
    train, test = synthkd.generate_toy(num_classes=3, per_class_train=6, per_class_test=3,
                                       seed=4)
    schedule = synthkd.make_schedule(8, 0.01, 0.1)
    model = synthkd.Denoiser(3, base_width=4, emb_dim=8, seed=7)
    out = model.forward(train.images()[:2], t=3, condition=1)
    assert out.shape == (2, 1, 16, 16)
    assert np.all(out == 0.0)  # zero-initialized output conv

    r = synthkd.train_denoiser(model, train, schedule, epochs=1, batch=8, seed=2)
    assert 0.8 < r["initial_loss"] < 1.2

    ds = synthkd.generate_dataset(model, schedule, s=2.0, steps=4, per_class=2, seed=9)
    assert len(ds) == 6
    labels = ds.labels()
    assert sorted(labels.tolist()) == [0, 0, 1, 1, 2, 2]

    with tempfile.TemporaryDirectory() as td:
        path = os.path.join(td, "set.skds")
        synthkd.save_skds(ds, path)
        back = synthkd.load_skds(path)
        assert back.digest() == ds.digest()
        assert np.array_equal(back.images(), ds.images())


def test_teacher_student_loop():
    train, test = synthkd.generate_toy(num_classes=3, per_class_train=30, per_class_test=10,
                                       seed=6)
    teacher = synthkd.Classifier("M", 3, seed=8)
    acc = synthkd.train_teacher(teacher, train, test, epochs=3, lr=0.05, seed=8)
    assert acc > 0.4, acc  # easy shapes separate quickly

    schedule = synthkd.make_schedule(8, 0.01, 0.1)
    dn = synthkd.Denoiser(3, base_width=4, emb_dim=8, seed=7)
    synthkd.train_denoiser(dn, train, schedule, epochs=1, batch=16, seed=2)
    ds = synthkd.generate_dataset(dn, schedule, s=2.0, steps=4, per_class=8, seed=9)

    student = synthkd.Classifier("S", 3, seed=10)
    r = synthkd.train_student(student, teacher, ds, test, tau=10.0, epochs=2, batch=8, seed=11)
    assert 0.0 <= r["final_accuracy"] <= 1.0
    ev = synthkd.teacher_eval_on_synthetic(teacher, ds)
    assert set(ev) == {"accuracy", "mean_confidence", "dist_variance"}


def main():
    tests = [v for k, v in sorted(globals().items()) if k.startswith("test_")]
    for fn in tests:
        fn()
        print(f"ok {fn.__name__}")
    print(f"{len(tests)} python smoke tests passed")


if __name__ == "__main__":
    main()
