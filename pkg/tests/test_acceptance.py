"""Acceptance suite: one check per release criterion, each printing a
PASS/FAIL line (run with -s to see them).

The full-scale protocol is not reproducible on a workstation, so the gate
is property-based plus a desk-scale synthetic end-to-end run: a 40-slide
4-class dataset whose class signal lives in 10% signature patches per
slide, embedded with the built-in color-histogram embedder.
"""
import time

import numpy as np
import pytest

from milattn.cli import run as cli_run
from milattn.embeddings import (
    EmbeddingStore,
    load_manifest,
    read_store,
    write_store,
)
from milattn.errors import (
    BadMagicError,
    CorruptPayloadError,
    DuplicateCoordinateError,
    UnsupportedVersionError,
)
from milattn.evaluation import confidence_interval, cross_evaluate, roc_auc_ovr
from milattn.model import (
    Bag,
    Gradients,
    backward,
    bag_loss,
    forward,
    init_params,
    load_checkpoint,
    params_to_vector,
    save_checkpoint,
    vector_to_params,
)
from milattn.numerics import RngStream, finite_diff_grad
from milattn.scoring import heatmap
from milattn.slides import SlideImage, tissue_mask
from milattn.training import AdamState, TrainConfig, adam_step

from synth import make_dataset

PINK = (230, 150, 170)


def check(name, ok, detail=""):
    tag = "PASS" if ok else "FAIL"
    suffix = f" ({detail})" if detail else ""
    print(f"[{tag}] {name}{suffix}")
    assert ok, f"{name}{suffix}"


@pytest.fixture(scope="session")
def synthetic_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synthetic")
    manifest, signatures, labels = make_dataset(root, seed=11, per_class_train=8,
                                                per_class_test=2, n_patches=60,
                                                signature_frac=0.1)
    return manifest, signatures, labels


@pytest.fixture(scope="session")
def trained_crossval(synthetic_dataset):
    """5-fold cross-evaluation on the synthetic task, timed."""
    manifest, signatures, labels = synthetic_dataset
    records = load_manifest(manifest)
    cfg = TrainConfig(epochs=60, learning_rate=1e-2, bag_size=20,
                      bags_per_epoch=256, val_bags=64, test_bags=400,
                      batch_size=64, weight_decay=1e-5, seed=7)
    start = time.perf_counter()
    result = cross_evaluate(records, cfg, 5, attention_dim=128)
    elapsed = time.perf_counter() - start
    return result, cfg, elapsed


def test_gradient_oracle():
    """Analytic backprop vs central finite differences across random configs."""
    start = time.perf_counter()
    worst = 0.0
    configs = 0
    for seed in (0, 1, 2):
        for n in (1, 5, 100):
            for rep in range(3):
                rng = RngStream(seed, stream_id=rep)
                params = init_params(4, 8, 4, rng)
                bag = Bag("g", int(rng.integers(0, 4)), rng.normal(0, 1, (n, 8)))
                _, grads = backward(params, bag)
                analytic = np.concatenate([g.ravel() for g in grads.tensors()])

                def f(vec):
                    return bag_loss(vector_to_params(vec, 4, 8, 4), bag)

                numeric = finite_diff_grad(f, params_to_vector(params), h=1e-6)
                denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
                worst = max(worst, float(np.max(np.abs(analytic - numeric) / denom)))
                configs += 1
    elapsed = time.perf_counter() - start
    check("gradient oracle", configs >= 20 and worst <= 1e-6 and elapsed < 10.0,
          f"{configs} configs, max rel err {worst:.2e}, {elapsed:.1f}s")


def test_attention_invariants():
    """Attention is a distribution; pooling is order-free."""
    rng = RngStream(202)
    max_sum_err = 0.0
    max_prob_err = 0.0
    max_att_err = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 51))
        m = int(rng.integers(2, 17))
        l = int(rng.integers(1, 9))
        params = init_params(l, m, 4, rng)
        emb = rng.normal(0, 1, (n, m))
        out = forward(params, Bag("a", 0, emb))
        max_sum_err = max(max_sum_err, abs(float(out.attention.sum()) - 1.0))
        perm = rng.permutation(n)
        permuted = forward(params, Bag("a", 0, emb[perm]))
        max_prob_err = max(max_prob_err, float(np.abs(permuted.probs - out.probs).max()))
        max_att_err = max(max_att_err,
                          float(np.abs(permuted.attention - out.attention[perm]).max()))
    check("attention weights sum to 1", max_sum_err <= 1e-12,
          f"max |sum-1| = {max_sum_err:.2e} over 1000 bags")
    check("permutation invariance", max_prob_err <= 1e-12 and max_att_err <= 1e-12,
          f"max prob diff {max_prob_err:.2e}, max attention diff {max_att_err:.2e}")


def test_confidence_interval_exactness():
    ci = confidence_interval([0.5, 0.6, 0.7])
    ok = abs(ci.mean - 0.6) <= 1e-6 and abs(ci.half_width - 0.113161) <= 1e-6
    flat = confidence_interval([0.6] * 5)
    check("confidence interval closed form", ok and flat.half_width == 0.0,
          f"0.6 +/- {ci.half_width:.6f}; zero-variance width {flat.half_width}")


def test_auc_pair_counting_equivalence():
    """Mann-Whitney AUC equals brute-force pair counting, ties included."""
    def oracle(scores, positive):
        pos = scores[positive]
        neg = scores[~positive]
        if pos.size == 0 or neg.size == 0:
            return float("nan")
        total = 0.0
        for p in pos:
            for q in neg:
                if p > q:
                    total += 1.0
                elif p == q:
                    total += 0.5
        return total / (pos.size * neg.size)

    mismatches = 0
    compared = 0
    gen = np.random.default_rng(404)
    for _ in range(200):
        n = int(gen.integers(2, 51))
        probs = gen.integers(0, 8, (n, 4)) / 7.0  # coarse grid forces ties
        labels = gen.integers(0, 4, n)
        res = roc_auc_ovr(probs, labels)
        for c in range(4):
            expected = oracle(probs[:, c], labels == c)
            got = res.per_class[c]
            compared += 1
            if np.isnan(expected) != np.isnan(got):
                mismatches += 1
            elif not np.isnan(expected) and got != expected:
                mismatches += 1
    check("AUC equals pair counting", mismatches == 0,
          f"{compared} class AUCs compared exactly, {mismatches} mismatches")


def test_synthetic_end_to_end(trained_crossval):
    """Desk-scale 5-fold cross-evaluation must solve the synthetic task."""
    result, _, elapsed = trained_crossval
    mean_auc = float(np.mean([m.macro_auc for m in result.fold_metrics]))
    mean_acc = float(np.mean([m.accuracy for m in result.fold_metrics]))
    check("synthetic cross-evaluation", mean_auc >= 0.95 and mean_acc >= 0.90
          and elapsed < 300.0,
          f"macro AUC {mean_auc:.4f}, accuracy {mean_acc:.4f}, {elapsed:.0f}s")


def test_heatmap_localization(synthetic_dataset, trained_crossval):
    """Signature patches must glow at least twice as hot as background."""
    manifest, signatures, labels = synthetic_dataset
    result, cfg, _ = trained_crossval
    params = result.fold_params[result.best_fold()]
    positive = [sid for sid, label in labels.items()
                if label in (2, 3) and "test" in sid]
    sid = sorted(positive)[0]
    store = read_store(manifest.parent / f"{sid}.mile", slide_id=sid)
    hm = heatmap(params, store, n_samples=1000, bag_size=cfg.bag_size, seed=99)
    final = hm.finalized()
    sig = set(signatures[sid])
    sig_vals = [v for xy, v in final.items() if xy in sig]
    bg_vals = [v for xy, v in final.items() if xy not in sig]
    ratio = float(np.mean(sig_vals) / np.mean(bg_vals))
    check("heatmap localization", ratio >= 2.0,
          f"slide {sid}: signature/background ratio {ratio:.1f}")


def test_output_determinism(synthetic_dataset, tmp_path):
    """Reruns with the same seed write byte-identical CSV/JSON artifacts."""
    manifest, _, _ = synthetic_dataset
    overrides = ["bag_size=10", "bags_per_epoch=32", "val_bags=16", "test_bags=32",
                 "batch_size=16", "epochs=2", "learning_rate=0.001", "seed=13"]
    dirs = [tmp_path / "runA", tmp_path / "runB"]
    for out in dirs:
        code = cli_run(["crossval", "--manifest", str(manifest), "--k", "2",
                        "--out-dir", str(out), "--attention-dim", "16", *overrides])
        assert code == 0
    crossval_files = ["report.json", "table.csv", "roc_points.csv",
                      "fold0.milc", "fold1.milc"]
    same = all((dirs[0] / f).read_bytes() == (dirs[1] / f).read_bytes()
               for f in crossval_files)
    check("crossval determinism", same, ", ".join(crossval_files))

    store_path = manifest.parent / "synth_c3_test8.mile"
    hm_dirs = [tmp_path / "hmA", tmp_path / "hmB"]
    for out in hm_dirs:
        code = cli_run(["heatmap", "--checkpoint", str(dirs[0] / "fold0.milc"),
                        "--store", str(store_path), "--n-samples", "100",
                        "--bag-size", "10", "--seed", "5", "--out-dir", str(out)])
        assert code == 0
    a = (hm_dirs[0] / "heatmap_synth_c3_test8.csv").read_bytes()
    b = (hm_dirs[1] / "heatmap_synth_c3_test8.csv").read_bytes()
    check("heatmap determinism", a == b, f"{len(a)} bytes")


def test_adam_first_step_closed_form():
    params = init_params(1, 1, 1, RngStream(0))
    params.w2[:] = 0.0
    grads = Gradients(np.full((1, 1), 2.0), np.zeros(1), np.zeros((1, 1)), np.zeros(1))
    adam_step(params, grads, AdamState.zeros_like(params), lr=1e-3, weight_decay=0.0)
    delta = float(params.w2[0, 0])
    check("Adam first-step closed form", abs(delta - (-1e-3)) <= 1e-9,
          f"step {delta:.12f}")


def test_format_roundtrips(tmp_path):
    """Stores and checkpoints: bit-exact roundtrip, corrupt inputs rejected."""
    gen = np.random.default_rng(5)
    store = EmbeddingStore(
        "rt", 16,
        np.array([(i * 32, (i % 3) * 32) for i in range(7)], np.uint32),
        gen.normal(0, 1, (7, 16)).astype(np.float32))
    spath = tmp_path / "rt.mile"
    write_store(store, spath)
    back = read_store(spath)
    store_ok = (back.values.tobytes() == store.values.tobytes()
                and np.array_equal(back.coords, store.coords))

    params = init_params(4, 8, 4, RngStream(1))
    cpath = tmp_path / "rt.milc"
    save_checkpoint(params, cpath)
    loaded = load_checkpoint(cpath)
    ckpt_ok = all(a.tobytes() == b.tobytes()
                  for a, b in zip(params.tensors(), loaded.tensors()))
    check("roundtrips bit-exact", store_ok and ckpt_ok)

    rejected = []
    data = bytearray(spath.read_bytes())
    bad_magic = tmp_path / "bad_magic.mile"
    bad_magic.write_bytes(b"XXXX" + bytes(data[4:]))
    try:
        read_store(bad_magic)
    except BadMagicError:
        rejected.append("bad magic")

    bad_version = tmp_path / "bad_version.mile"
    corrupted = bytearray(data)
    corrupted[4] = 9
    bad_version.write_bytes(bytes(corrupted))
    try:
        read_store(bad_version)
    except UnsupportedVersionError:
        rejected.append("version unsupported")

    truncated = tmp_path / "trunc.mile"
    truncated.write_bytes(bytes(data[:-3]))
    try:
        read_store(truncated)
    except CorruptPayloadError:
        rejected.append("corrupt payload")

    duplicated = bytearray(data)
    rec = 8 + 16 * 4
    duplicated[20 + rec:20 + rec + 8] = duplicated[20:20 + 8]
    dup_path = tmp_path / "dup.mile"
    dup_path.write_bytes(bytes(duplicated))
    try:
        read_store(dup_path)
    except DuplicateCoordinateError:
        rejected.append("duplicate patch coordinate")

    trunc_ckpt = tmp_path / "trunc.milc"
    trunc_ckpt.write_bytes(cpath.read_bytes()[:-8])
    try:
        load_checkpoint(trunc_ckpt)
    except CorruptPayloadError:
        rejected.append("checkpoint corrupt payload")

    check("corrupt files rejected by class", len(rejected) == 5, "; ".join(rejected))


def test_tissue_mask_geometry():
    px = np.full((64, 128, 3), 255, dtype=np.uint8)
    px[:, 64:] = PINK
    mask = tissue_mask(SlideImage(px), patch_size=16)
    eligible = {tuple(c) for c in mask.eligible_coords()}
    expected = {(x, y) for x in (64, 80, 96, 112) for y in (0, 16, 32, 48)}
    half_ok = eligible == expected

    white = SlideImage(np.full((64, 64, 3), 255, dtype=np.uint8))
    white_ok = tissue_mask(white, patch_size=16).grid.sum() == 0
    check("tissue mask geometry", half_ok and white_ok,
          f"{len(eligible)} pink-half cells, all-white eligible = 0")
