"""Acceptance suite: one block per criterion, each checked at its stated tolerance.

A PASS/FAIL line per criterion is printed at the end of the pytest run. The
desk-scale criteria share trained models through session fixtures that cache
checkpoints under ``MINIWEAVE_ACCEPTANCE_CACHE`` (default ``.cache/acceptance``
in the repository); delete that directory to retrain from scratch.
"""

import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from miniweave import checkpoint as CK
from miniweave import lora
from miniweave import metrics as M
from miniweave import pipeline as P
from miniweave import study as ST
from miniweave import tensor as T
from miniweave import training as TR
from miniweave.codec import TextEncoder, Vocabulary
from miniweave.config import RunConfig
from miniweave.unet import UNetConfig, VideoUNet

from gradcheck import check
from test_tensor import GRAD_CASES
from test_training import brute_force_loss, naive_pool, random_records

CACHE = Path(os.environ.get("MINIWEAVE_ACCEPTANCE_CACHE", Path(__file__).resolve().parents[1] / ".cache" / "acceptance"))
DEMO = "pair0"


def detail(request, text: str) -> None:
    request.node.user_properties.append(("detail", text))


# -- criterion 1 ---------------------------------------------------------------------

@pytest.mark.criterion(1, "gradient suite matches central differences (rtol 1e-5) in < 30 s")
def test_gradient_suite(request):
    t0 = time.perf_counter()
    for name in sorted(GRAD_CASES):
        fn, arrays = GRAD_CASES[name]
        check(fn, *arrays, rtol=1e-5)
    spent = time.perf_counter() - t0
    detail(request, f"{len(GRAD_CASES)} ops in {spent:.2f} s")
    assert spent < 30.0


# -- criterion 2 ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def fresh_net_inputs():
    cond = TextEncoder(Vocabulary(["a", "red", "square"]), seed=0).encode_prompt("a red square")
    z = np.random.default_rng(0).standard_normal((3, 48, 16, 16)).astype(np.float32)
    return z, cond


@pytest.mark.criterion(2, "zero-initialised temporal modules and fresh LoRA are exact identities")
@pytest.mark.parametrize("t", [0, 480, 980])
def test_zero_init_temporal_identity(fresh_net_inputs, t):
    z, cond = fresh_net_inputs
    net = VideoUNet(UNetConfig(seed=7))
    with T.no_grad():
        a, _ = net.predict_noise(z, t, cond, temporal=True)
        b, _ = net.predict_noise(z, t, cond, temporal=False)
    assert np.array_equal(a.data, b.data)


@pytest.mark.criterion(2, "zero-initialised temporal modules and fresh LoRA are exact identities")
def test_fresh_lora_identity(fresh_net_inputs):
    z, cond = fresh_net_inputs
    net = VideoUNet(UNetConfig(seed=8))
    with T.no_grad():
        before, rec0 = net.predict_noise(z, 300, cond, record=True)
        lora.attach(net, "*.attn2.to_v", rank=4, seed=3)
        after, rec1 = net.predict_noise(z, 300, cond, record=True)
    assert np.array_equal(before.data, after.data)
    assert all(np.array_equal(rec0[k].data, rec1[k].data) for k in rec0)


# -- criterion 5 ---------------------------------------------------------------------

@pytest.mark.criterion(5, "scam/tcam match brute force (1e-6), zero iff confined, pyramid matches naive pooling")
@pytest.mark.parametrize("seed", range(5))
def test_loss_oracle(seed):
    rng = np.random.default_rng(seed)
    recs = random_records(rng, frames=3, heads=2, tokens=6)
    masks = TR.pool_masks((rng.random((3, 8, 8)) < 0.4).astype(float), [16, 4])
    positions = sorted(rng.choice(6, 2, replace=False).tolist())
    want = brute_force_loss(recs, masks.levels, positions)
    wrapped = {k: T.Tensor(v) for k, v in recs.items()}
    assert abs(TR.scam_loss(wrapped, masks, positions).item() - want) <= 1e-6
    assert abs(TR.tcam_loss(wrapped, masks, positions).item() - want) <= 1e-6


@pytest.mark.criterion(5, "scam/tcam match brute force (1e-6), zero iff confined, pyramid matches naive pooling")
def test_loss_zero_iff_confined():
    rng = np.random.default_rng(0)
    mask = (rng.random((2, 4, 4)) < 0.5).astype(float)
    mask[:, 0, 0] = 1.0
    masks = TR.pool_masks(mask, [16])
    gt = masks.tokens(16)
    probs = rng.random((2, 2, 16, 3)) * gt[:, None, :, None]
    probs[..., 2] += 1e-3 * (1 - gt[:, None, :])  # token 2 leaks a little
    for fn in (TR.scam_loss, TR.tcam_loss):
        assert fn({"l": probs}, masks, [0, 1]).item() == 0.0
        assert fn({"l": probs}, masks, [2]).item() > 0.0


@pytest.mark.criterion(5, "scam/tcam match brute force (1e-6), zero iff confined, pyramid matches naive pooling")
@pytest.mark.parametrize("seed", range(3))
def test_mask_pyramid_exact(seed):
    mask = (np.random.default_rng(seed).random((2, 64, 64)) < 0.05).astype(float)
    pyr = TR.pool_masks(mask, [256, 64])
    for side in (16, 8):
        assert np.array_equal(pyr.levels[side], naive_pool(mask, side))


# -- criterion 6 ---------------------------------------------------------------------

class _Fixed:
    def __init__(self, vectors):
        self.vectors = iter(vectors)

    def __call__(self, _):
        v = np.asarray(next(self.vectors), dtype=float)
        return v / np.linalg.norm(v)


@pytest.mark.criterion(6, "metric oracles: 48.13 dB, 100 dB cap, frame consistency 1 / 0 / 1/3")
def test_metric_oracles():
    src = np.full((2, 3, 8, 8), 100.0)
    mask = np.zeros((8, 8))
    mask[2:5, 2:5] = 1
    assert abs(M.m_psnr(src, src + 1, mask, quantized=True) - 48.13) <= 0.01
    v = np.random.default_rng(0).random((2, 3, 8, 8))
    assert M.m_psnr(v, v.copy(), mask) == 100.0
    frame = np.random.default_rng(1).random((3, 16, 16))
    assert abs(M.frame_consistency([frame, frame, frame]) - 1.0) <= 1e-6
    assert abs(M.frame_consistency([0, 1], _Fixed([[1, 0], [0, 1]])) - 0.0) <= 1e-6
    assert abs(M.frame_consistency([0, 1, 2], _Fixed([[1, 0], [1, 0], [0, 1]])) - 1 / 3) <= 1e-6


# -- desk-scale fixtures -------------------------------------------------------------

@pytest.fixture(scope="session")
def desk_cfg():
    return RunConfig()


def _cached_state(name: str, cfg: RunConfig, produce):
    path = CACHE / f"{name}-{cfg.hash()}.mwv"
    if path.exists():
        tensors, meta = CK.load(path)
        return tensors, meta["seconds"]
    t0 = time.perf_counter()
    state = produce()
    seconds = time.perf_counter() - t0
    CK.save(path, state, {"seconds": seconds})
    return state, seconds


@pytest.fixture(scope="session")
def base(desk_cfg):
    """Pretrained desk denoiser: the stand-in for a pretrained text-to-image model."""

    def produce():
        models = P.build_models(desk_cfg)
        P.fit_base(models)
        return P.state_of(models)

    return _cached_state("base", desk_cfg, produce)


@pytest.fixture(scope="session")
def starts(desk_cfg, base):
    """Phase-1 states per pair, plus the seconds spent in CATI."""
    base_state, _ = base
    pairs = P.make_pairs(desk_cfg)
    concept = [p for p in pairs if p.concept is not None]
    states, seconds = {p.name: base_state for p in pairs}, 0.0
    for pair in concept:
        def produce(pair=pair):
            models = P.build_models(desk_cfg)
            P.load_state(models, base_state)
            P.fit_cati(models, P.load_pair(models, pair))
            return P.state_of(models)

        states[pair.name], spent = _cached_state(f"cati-{pair.name}", desk_cfg, produce)
        seconds += spent
    return states, seconds


@pytest.fixture(scope="session")
def study(desk_cfg, base, starts):
    """Both tuning variants over every pair; keeps the demo pair's DPS state."""
    summary_path = CACHE / f"study-{desk_cfg.hash()}.json"
    dps_path = CACHE / f"dps-{DEMO}-{desk_cfg.hash()}.mwv"
    if summary_path.exists() and dps_path.exists():
        return ST.StudySummary.from_dict(json.loads(summary_path.read_text())), CK.load(dps_path)[0]
    keep = {}
    summary = ST.run_study(desk_cfg, base[0], keep=keep, starts=starts)
    CK.save(dps_path, keep[(DEMO, "dps")], {"pair": DEMO})
    summary_path.write_text(json.dumps(summary.to_dict(), indent=2))
    return summary, keep[(DEMO, "dps")]


def _loaded(cfg, state) -> P.Models:
    models = P.build_models(cfg)
    P.load_state(models, state)
    return models


def _demo_pair(cfg):
    return {p.name: p for p in P.make_pairs(cfg)}[DEMO]


# -- criteria 3 and 4 ----------------------------------------------------------------

@pytest.mark.slow
@pytest.mark.criterion(3, "invert then sample at guidance 1 on a CATI model: relative L2 <= 1e-2 in < 2 min")
def test_ddim_round_trip(request, desk_cfg, starts):
    models = _loaded(desk_cfg, starts[0][DEMO])
    pd = P.load_pair(models, _demo_pair(desk_cfg))
    t0 = time.perf_counter()
    inv, _ = P.invert_pair(models, pd)
    z = P.reconstruct_latents(models, inv, pd.pair.source_prompt, guidance=1.0)
    spent = time.perf_counter() - t0
    rel = float(np.linalg.norm(z - pd.latents) / np.linalg.norm(pd.latents))
    detail(request, f"relative L2 {rel:.2e}, {spent:.0f} s")
    assert rel <= 1e-2
    assert spent < 120.0


@pytest.mark.slow
@pytest.mark.criterion(4, "identity edit with full attention control matches reconstruction within 1e-4")
def test_identity_edit(request, desk_cfg, starts):
    models = _loaded(desk_cfg, starts[0][DEMO])
    pd = P.load_pair(models, _demo_pair(desk_cfg))
    src = pd.pair.source_prompt
    inv, record = P.invert_pair(models, pd, target_prompt=src)
    edited = P.edit_latents(models, inv, record, src, src, control=True)
    recon = P.reconstruct_latents(models, inv, src)
    err = float(np.abs(edited - recon).max())
    detail(request, f"max |edit - reconstruction| {err:.1e} at guidance {desk_cfg.sampler.guidance}")
    assert err <= 1e-4


# -- criterion 7 ---------------------------------------------------------------------

@pytest.mark.slow
@pytest.mark.criterion(7, "DPS beats plain tuning on M-PSNR and cuts outside-mask attention >= 30% in < 30 min")
def test_directional_dps(request, desk_cfg, base, study):
    summary, _ = study
    assert len(summary.outcomes) >= 5
    detail(request, f"M-PSNR {summary.mean_m_psnr_dps:.2f} vs {summary.mean_m_psnr_baseline:.2f} dB, "
                    f"outside mass {summary.mean_mass_before:.3f} -> {summary.mean_mass_dps:.3f} "
                    f"({100 * summary.mass_drop:.0f}% drop), tuning to metrics {summary.seconds / 60:.1f} min "
                    f"(+{base[1] / 60:.1f} min base pretraining)")
    assert summary.mean_m_psnr_dps > summary.mean_m_psnr_baseline
    assert summary.mass_drop >= 0.30
    assert summary.seconds < 30 * 60


# -- criterion 8 ---------------------------------------------------------------------

@pytest.mark.slow
@pytest.mark.criterion(8, "memory-saving recomputation matches cached attention within 1e-3 per pixel")
def test_memory_saving_equivalence(request, desk_cfg, study):
    _, dps_state = study
    models = _loaded(desk_cfg, dps_state)
    pd = P.load_pair(models, _demo_pair(desk_cfg))
    src, tgt = pd.pair.source_prompt, pd.pair.target_prompt
    videos = {}
    for saving in (False, True):
        inv, record = P.invert_pair(models, pd, memory_saving=saving)
        videos[saving] = P.decode(models, P.edit_latents(models, inv, record, src, tgt))
    err = float(np.abs(videos[True] - videos[False]).max())
    detail(request, f"max pixel difference {err:.1e}")
    assert err <= 1e-3


# -- criterion 9 ---------------------------------------------------------------------

def _roundtrip(state: dict) -> dict:
    return CK.loads(CK.dumps(state))[0]


@pytest.mark.slow
@pytest.mark.criterion(9, "checkpoint diff: CATI changes only slots and value LoRA, DPS only its trainable set")
def test_freeze_contract_cati(request, desk_cfg, base, starts):
    before, after = _roundtrip(base[0]), _roundtrip(starts[0][DEMO])
    changed = CK.diff(before, after)
    allowed = [n for n in changed if n.startswith(P.SLOT_PREFIX) or (".lora." in n and ".attn2.to_v" in n)]
    detail(request, f"CATI changed {len(changed)} tensors")
    assert changed and changed == allowed
    assert any(n.startswith(P.SLOT_PREFIX) for n in changed)
    # B starts at zero, so a trained adapter shows up as a nonzero B
    assert any(np.any(after[n] != 0) for n in changed if n.endswith(".lora.B"))


@pytest.mark.slow
@pytest.mark.criterion(9, "checkpoint diff: CATI changes only slots and value LoRA, DPS only its trainable set")
def test_freeze_contract_dps(request, desk_cfg, starts, study):
    before, after = _roundtrip(starts[0][DEMO]), _roundtrip(study[1])
    changed = CK.diff(before, after)
    models = _loaded(desk_cfg, starts[0][DEMO])
    trainable = {P.UNET_PREFIX + n for n in TR.dps_trainable_names(models.unet)}
    detail(request, f"DPS changed {len(changed)} of {len(trainable)} trainable tensors")
    assert changed and set(changed) <= trainable
