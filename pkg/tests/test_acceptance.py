"""Acceptance criteria 1-11.  Each test records one PASS/FAIL line in the pytest summary."""

import json
import math
import time

import numpy as np
import pytest

from fractalnet import droppath
from fractalnet.cli import main
from fractalnet.dataio import IdxFormatError, IdxLengthError, load_idx, read_idx_images, synth_splits, write_idx
from fractalnet.engine import forward, load_checkpoint
from fractalnet.engine import kernels as K
from fractalnet.engine.gradcheck import KERNEL_CASES, run_suite
from fractalnet.topology import assemble_network, column_view, structural_stats, verify_recursion_equivalence
from fractalnet.trainer import TrainPlan, evaluate, lr_schedule, train

from conftest import warmed_store


def test_c01_structural_suite(verdict):
    start = time.perf_counter()
    bad = []
    for C in range(1, 7):
        for B in range(1, 6):
            net = assemble_network(C, B, (1,) * B, 2, input_channels=1, input_size=32)
            st = structural_stats(net)
            per_block = {b: sum(j.block == b for j in net.joins) for b in range(1, B + 1)}
            want_joins = 2 ** (C - 2) if C >= 2 else 0
            if (st.depth, st.conv_count) != (B * 2 ** (C - 1), B * (2 ** C - 1)) or \
                    set(per_block.values()) != {want_joins}:
                bad.append((C, B))
    anchor = structural_stats(assemble_network(4, 5, (1,) * 5, 2, input_channels=1, input_size=32)).depth
    by_columns = [structural_stats(assemble_network(C, 5, (1,) * 5, 2, input_channels=1, input_size=32)).depth
              for C in range(1, 7)]
    elapsed = time.perf_counter() - start
    ok = not bad and anchor == 40 and by_columns == [5, 10, 20, 40, 80, 160] and elapsed < 1.0
    verdict(1, "structural formulas for C<=6, B<=5", ok, f"{elapsed:.2f}s, depths {by_columns}")
    assert ok, bad


def test_c02_recursion_oracle(verdict):
    start = time.perf_counter()
    results = [verify_recursion_equivalence(C) for C in range(1, 7)]
    elapsed = time.perf_counter() - start
    ok = all(results) and elapsed < 1.0
    verdict(2, "closed form isomorphic to literal recursion, C<=6", ok, f"{elapsed:.2f}s")
    assert ok


def test_c03_gradient_suite(verdict):
    start = time.perf_counter()
    results = run_suite(range(20), tolerance=1e-4)
    elapsed = time.perf_counter() - start
    worst = max(r.error for r in results)
    names = {r.name for r in results}
    ok = all(r.passed for r in results) and names == set(KERNEL_CASES) and elapsed < 60
    verdict(3, "finite-difference gradients, 20 seeds", ok,
            f"{len(names)} cases, max rel err {worst:.2e}, {elapsed:.1f}s")
    assert ok


def test_c04_join_expectation(verdict):
    start = time.perf_counter()
    k, n = 8, 10 ** 5
    rng = np.random.default_rng(2024)
    inputs = [rng.normal(size=4) for _ in range(k)]
    (act,) = droppath.sample_join_activity([k], 0.15, rng, n)
    outs = np.stack([K.masked_mean_join(inputs, a)[0] for a in act])
    plain = np.mean(inputs, axis=0)
    se = outs.std(axis=0, ddof=1) / math.sqrt(n)
    z = np.abs(outs.mean(axis=0) - plain) / se
    elapsed = time.perf_counter() - start
    ok = bool(np.all(z <= 3)) and elapsed < 10
    verdict(4, "Monte-Carlo join mean within 3 SE of plain mean", ok,
            f"max |z| {z.max():.2f}, {elapsed:.1f}s")
    assert ok


def test_c05_column_global_equivalence(verdict):
    start = time.perf_counter()
    net = assemble_network(4, 2, (4, 4), 3, input_channels=2, input_size=8)
    store = warmed_store(net, seed=5, precision="f32")
    _, te = synth_splits(3, 8, 3, 8)
    rng = np.random.default_rng(1)
    x = rng.normal(size=(6, 2, 8, 8)).astype(np.float32)
    y = rng.integers(0, 3, 6)
    ok = True
    for c in range(1, 5):
        view = column_view(net, c)
        sub = store.transplant(view)
        mask = droppath.global_mask(net, c)
        for mode in ("train", "eval"):
            a = forward(net, store, x, y, mask, mode)
            b = forward(view, sub, x, y, None, mode)
            ok &= a.logits.tobytes() == b.logits.tobytes() and a.loss == b.loss
    # evaluate() on a one-channel dataset needs a one-channel network
    net1 = assemble_network(4, 2, (4, 4), 3, input_channels=1, input_size=8)
    store1 = warmed_store(net1, seed=6, precision="f32")
    for c in range(1, 5):
        view = column_view(net1, c)
        ok &= evaluate(net1, store1, te, droppath.global_mask(net1, c)) == \
            evaluate(view, store1.transplant(view), te)
    elapsed = time.perf_counter() - start
    ok = ok and elapsed < 10
    verdict(5, "global(c) bit-identical to extracted column, C=4 B=2", ok, f"{elapsed:.2f}s")
    assert ok


DESK_PLAN = dict(epochs=30, batch_size=32, base_lr=0.02, momentum=0.9, droppath=True,
                 local_fraction=0.5, local_drop_rate=0.15, dropout=(0.0, 0.1), seed=0)


@pytest.fixture(scope="module")
def desk_data():
    # 4 classes, 16x16, 500/250 per class -> 2000 train / 1000 test
    return synth_splits(0, 500, 4, 16, test_per_class=250)


def desk_net():
    return assemble_network(3, 2, (8, 16), 4, input_channels=1, input_size=16)


@pytest.mark.slow
def test_c06_desk_scale_training(verdict, desk_data):
    tr, te = desk_data
    assert (len(tr), len(te)) == (2000, 1000)
    net = desk_net()
    start = time.perf_counter()
    store, records = train(net, TrainPlan(**DESK_PLAN), tr, te)
    deep = column_view(net, net.columns)
    deep_err = evaluate(deep, store.transplant(deep), te).error_pct
    elapsed = time.perf_counter() - start
    full_err = records[-1].test_error_pct
    ok = full_err <= 10.0 and abs(deep_err - full_err) <= 5.0 and elapsed <= 600
    verdict(6, "desk-scale training C=3 B=2", ok,
            f"full {full_err:.2f}%, deepest column {deep_err:.2f}%, {elapsed:.0f}s")
    assert ok


@pytest.mark.slow
def test_c07_regularization_direction(verdict, desk_data):
    tr, te = desk_data
    subset = tr.subset(500)
    net = desk_net()
    start = time.perf_counter()
    wins, pairs = 0, []
    for seed in range(5):
        errs = []
        for use_dp in (True, False):
            plan = TrainPlan(**(DESK_PLAN | dict(seed=seed, droppath=use_dp, monitor=False)))
            store, _ = train(net, plan, subset)
            errs.append(evaluate(net, store, te).error_pct)
        pairs.append(tuple(errs))
        wins += errs[0] <= errs[1] + 1.0
    elapsed = time.perf_counter() - start
    ok = wins >= 3 and elapsed <= 900
    detail = ", ".join(f"{a:.1f}/{b:.1f}" for a, b in pairs)
    verdict(7, "drop-path <= no drop-path + 1pt in >=3/5 seeds", ok,
            f"{wins}/5, dp/no-dp error % {detail}, {elapsed:.0f}s")
    assert ok


def test_c08_lr_schedule(verdict):
    seq = [lr_schedule(e, 400, 0.02) for e in range(400)]
    want = [0.02] * 200 + [0.002] * 100 + [2e-4] * 50 + [2e-5] * 25 + [2e-6] * 25
    ms = [lr_schedule(e, 70, 0.1, (50, 65)) for e in range(70)]
    drops = [e for e in range(1, 70) if ms[e] < ms[e - 1]]
    ok = seq == want and drops == [50, 65]
    verdict(8, "LR plateaus for E=400 and milestones 50/65", ok, f"drops at {drops}")
    assert ok


def test_c09_determinism(verdict, tmp_path):
    argv = ["arch.columns=3", "arch.blocks=2", "arch.channels=4,8", "train.epochs=3",
            "train.record_time=false", "--data", "synth:4,40,4,16"]
    blobs = []
    for tag in "ab":
        ckpt, metrics = tmp_path / f"{tag}.ckpt", tmp_path / f"{tag}.jsonl"
        assert main(["train", *argv, "--checkpoint", str(ckpt), "--metrics", str(metrics)]) == 0
        blobs.append((ckpt.read_bytes(), metrics.read_bytes()))
    net = assemble_network(3, 2, (4, 8), 4, input_channels=1, input_size=16)
    store = load_checkpoint(tmp_path / "a.ckpt", net)
    x = synth_splits(4, 40, 4, 16)[1].images.astype(np.float32)
    outs = {forward(net, store, x, mode="eval").logits.tobytes() for _ in range(3)}
    ok = blobs[0] == blobs[1] and len(outs) == 1
    verdict(9, "bit-identical metrics/checkpoints and eval forward", ok)
    assert ok


def test_c10_anytime_ordering(verdict, tmp_path, capsys):
    net = assemble_network(4, 5, (16,) * 5, 10, input_channels=16, input_size=32)
    flops = [structural_stats(column_view(net, c)).flop_count for c in range(1, 5)]
    ratios = [b / a for a, b in zip(flops, flops[1:])]
    ordered = all(b > a for a, b in zip(flops, flops[1:])) and all(abs(q - 2) < 0.1 for q in ratios)

    argv = ["arch.columns=3", "arch.blocks=2", "arch.channels=4,8", "--data", "synth:2,20,4,16",
            "--checkpoint", str(tmp_path / "f.ckpt")]
    assert main(["train", *argv, "train.epochs=2", "train.monitor=false"]) == 0
    capsys.readouterr()
    assert main(["anytime-bench", *argv, "--json"]) == 0
    rows = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
    small = assemble_network(3, 2, (4, 8), 4, input_channels=1, input_size=16)
    store = load_checkpoint(tmp_path / "f.ckpt", small)
    ref = evaluate(small, store, synth_splits(2, 20, 4, 16)[1], droppath.global_mask(small, 3))
    match = (rows[-1]["loss"], rows[-1]["error_pct"]) == (ref.loss, ref.error_pct)
    ok = ordered and match
    verdict(10, "per-column MACs double; last anytime row equals global(C)", ok,
            "ratios " + ", ".join(f"{q:.3f}" for q in ratios))
    assert ok


def test_c11_data_integrity(verdict, tmp_path):
    rng = np.random.default_rng(11)
    imgs = rng.integers(0, 256, (2, 6, 6), dtype=np.uint8)
    write_idx(tmp_path / "i", tmp_path / "l", imgs, np.array([0, 1]))
    exact = np.array_equal(read_idx_images(tmp_path / "i")[:, 0], imgs)
    ds = load_idx(tmp_path / "i", tmp_path / "l")
    exact &= np.array_equal(np.rint((ds.images[:, 0] + ds.channel_mean[0]) * 255).astype(np.uint8), imgs)

    data = (tmp_path / "i").read_bytes()
    (tmp_path / "bad").write_bytes(b"\0\0\x08\x02" + data[4:])
    (tmp_path / "short").write_bytes(data[:-1])
    rejected = []
    for name, err in (("bad", IdxFormatError), ("short", IdxLengthError)):
        try:
            read_idx_images(tmp_path / name)
            rejected.append(False)
        except err:
            rejected.append(True)
    ok = exact and all(rejected)
    verdict(11, "IDX round trip exact; bad magic and truncation rejected", ok)
    assert ok
