import hashlib
from dataclasses import replace

import numpy as np
import pytest
from scipy import signal as sps

from avasdl.labels import parse_labels
from avasdl.rig import build_default_rig, expected_tdoa
from avasdl.sim import (
    OBS_WIDTH, SceneError, SceneScript, frame_activity, fractional_delay, generate_corpus, make_excitation,
    random_script, read_manifest, render_audio, render_scene, script_from_ini, script_to_ini,
)


@pytest.mark.parametrize("kind", ["am_noise", "harmonic"])
def test_excitation_deterministic_and_normalized(kind):
    a = make_excitation(kind, 1.0, 3)
    assert np.array_equal(a, make_excitation(kind, 1.0, 3))
    assert np.sqrt(np.mean(a**2)) == pytest.approx(0.1, abs=1e-6)
    assert a.size == 48000


def test_am_noise_band_limit():
    x = make_excitation("am_noise", 4.0, 0)
    f, p = sps.periodogram(x, fs=48000)
    low = p[(f > 0) & (f < 100)].mean()
    band = p[(f > 200) & (f < 8000)].mean()
    assert 10 * np.log10(band / low) >= 20


def test_excitation_rejects_bad_input():
    with pytest.raises(SceneError):
        make_excitation("am_noise", 0.0, 0)
    with pytest.raises(SceneError):
        make_excitation("speech", 1.0, 0)


def test_fractional_delay_paths_agree():
    x = np.random.default_rng(0).standard_normal(3000)
    fast = fractional_delay(x, np.full(x.size, 12.37))
    slow = fractional_delay(x, np.r_[np.full(x.size - 1, 12.37), 12.37 + 1e-15])
    assert np.max(np.abs(fast - slow)) < 1e-9


def test_fractional_delay_integer_is_shift():
    x = np.random.default_rng(1).standard_normal(500)
    y = fractional_delay(x, np.full(500, 5.0))
    assert np.allclose(y[5:], x[:-5], atol=1e-12)
    assert np.allclose(y[:5], 0, atol=1e-12)


def test_frame_activity_half_open():
    mask = frame_activity([(0.5, 1.5)], 60)
    assert np.flatnonzero(mask).tolist() == list(range(15, 45))


def test_script_validation():
    ok = SceneScript(2.0, [(0.0, 0.0, 3.0)], [(0.5, 1.0)])
    ok.validate()
    for bad in (
        SceneScript(2.0, [(0.0, 50.0, 3.0)], []),
        SceneScript(2.0, [(0.0, 0.0, 3.0)], [(1.0, 0.5)]),
        SceneScript(2.0, [(0.0, 0.0, 3.0)], [(0.0, 1.0), (0.5, 1.5)]),
        SceneScript(2.0, [(0.0, 0.0, 3.0)], [(0.0, 2.5)]),
        SceneScript(2.0, [(0.0, 0.0, -1.0)], []),
        SceneScript(2.0, [(0.0, 0.0, 3.0)], [], excitation_kind="chirp"),
    ):
        with pytest.raises(SceneError):
            bad.validate()


def test_static_center_source_labels(rig):
    script = SceneScript(2.0, [(0.0, 0.0, 3.0)], [(0.0, 2.0)], snr_db=None)
    scene = render_scene(rig, script)
    central = scene.labels[5]
    assert len(central) == 60
    assert all(lab.active and lab.x_center_norm == pytest.approx(0.5, abs=1e-12) for lab in central)


def test_activity_interval_labels(rig):
    script = SceneScript(2.0, [(0.0, 10.0, 3.0)], [(0.5, 1.5)])
    scene = render_scene(rig, script)
    for cam, rows in scene.labels.items():
        assert [r.frame_index for r in rows if r.active] == list(range(15, 45))


def _measured_delay(a, b, max_lag=40):
    # integer peak of the cross-correlation refined by a parabola
    n = a.size
    c = np.array([np.dot(a[max(0, -k):n - max(0, k)], b[max(0, k):n - max(0, -k)]) for k in range(-max_lag, max_lag + 1)])
    i = int(np.argmax(c))
    y0, y1, y2 = c[i - 1], c[i], c[i + 1]
    return i - max_lag + 0.5 * (y0 - y2) / (y0 - 2 * y1 + y2)


def test_rendered_delays_match_geometry(rig):
    script = SceneScript(1.0, [(0.0, 20.0, 3.5)], [(0.0, 1.0)], snr_db=None, seed=4)
    audio = render_audio(rig, script)
    ref = rig.layout.reference_index
    for j in rig.layout.non_reference:
        want = expected_tdoa(rig.layout, j, 20.0, 3.5) * 48000
        got = _measured_delay(audio[ref, 2000:-2000], audio[j, 2000:-2000])
        assert abs(got - want) <= 0.5, (j, got, want)


def test_snr_default_is_30db(rig):
    clean = render_audio(rig, SceneScript(1.0, [(0.0, 5.0, 3.0)], [(0.0, 1.0)], snr_db=None, seed=2))
    noisy = render_audio(rig, SceneScript(1.0, [(0.0, 5.0, 3.0)], [(0.0, 1.0)], seed=2))
    ref = rig.layout.reference_index
    snr = 10 * np.log10(np.mean(clean[ref] ** 2) / np.mean((noisy[ref] - clean[ref]) ** 2))
    assert snr == pytest.approx(30, abs=0.3)


def test_active_frames_carry_energy(rig):
    script = SceneScript(2.0, [(0.0, -10.0, 4.0)], [(0.3, 0.9), (1.2, 1.8)], seed=3)
    scene = render_scene(rig, script)
    ref = scene.clip.samples[rig.layout.reference_index]
    silent = ref[: int(0.25 * 48000)]
    floor = np.sqrt(np.mean(silent**2))
    for lab in scene.labels[5]:
        seg = ref[lab.frame_index * 1600:(lab.frame_index + 1) * 1600]
        if lab.active:
            assert np.sqrt(np.mean(seg**2)) > 3 * floor


def test_trajectory_outside_every_view_rejected():
    # cameras moved 3 m to the right cannot see a talker 1 m away on the far left
    base = build_default_rig()
    cams = tuple(replace(c, position_m=(c.position_m[0] + 3.0, 0.1, 0.0)) for c in base.cameras)
    rig = replace(base, cameras=cams)
    with pytest.raises(SceneError):
        render_audio(rig, SceneScript(1.0, [(0.0, -40.0, 1.0)], []))


def test_visual_bump_and_occlusion(rig):
    script = SceneScript(2.0, [(0.0, 10.0, 3.0)], [(0.0, 2.0)], occlusion=[(1.0, 1.5)], seed=1)
    scene = render_scene(rig, script)
    vis = scene.visual
    assert vis.shape == (11, 60, OBS_WIDTH)
    for cam in range(11):
        x = scene.labels[cam][0].x_center_norm
        assert abs(np.argmax(vis[cam, 0]) + 0.5 - x * OBS_WIDTH) <= 1
        assert np.max(np.abs(vis[cam, 30:45])) < 0.2  # occluded: noise only


def test_face_offset_shifts_box_not_mouth(rig):
    base = render_scene(rig, SceneScript(1.0, [(0.0, 0.0, 3.0)], [(0.0, 1.0)], snr_db=None))
    off = render_scene(rig, SceneScript(1.0, [(0.0, 0.0, 3.0)], [(0.0, 1.0)], snr_db=None, face_offset_px=40.0))
    a, b = base.labels[5][3], off.labels[5][3]
    assert a.mouth_x_px == b.mouth_x_px
    assert (b.x_center_norm - a.x_center_norm) * 2448 == pytest.approx(40.0)


def test_reflection_adds_energy(rig):
    kw = dict(duration=0.5, trajectory=[(0.0, 0.0, 3.0)], activity=[(0.0, 0.5)], snr_db=None)
    dry = render_audio(rig, SceneScript(**kw))
    wet = render_audio(rig, SceneScript(**kw, reflection_wall_m=2.0))
    assert not np.allclose(dry, wet)


def test_script_ini_round_trip():
    s = SceneScript(3.0, [(0.0, -5.0, 3.0), (3.0, 5.5, 4.0)], [(0.1, 1.0), (2.0, 2.5)], "harmonic", 17,
                    None, [(1.0, 1.5)], 12.5, 1.5)
    assert script_from_ini(script_to_ini(s)) == s
    with pytest.raises(SceneError):
        script_from_ini(script_to_ini(s).replace("[scene]", "[scene]\ncolour = red"))


def test_random_scripts_are_valid():
    rng = np.random.default_rng(0)
    for i in range(50):
        random_script(rng, 2.0, i).validate()


def _tree_hash(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode() + p.read_bytes())
    return h.hexdigest()


def test_generate_corpus_counts_and_determinism(tmp_path, rig):
    m1 = generate_corpus(rig, 12, 7, tmp_path / "a", duration=0.5)
    recs = read_manifest(m1)
    assert len(recs) == 12
    assert sum(r["split"] == "train" for r in recs) == 10
    assert sum(r["split"] == "test" for r in recs) == 2
    assert len([p for p in (tmp_path / "a").iterdir() if p.is_dir()]) == 12
    m2 = generate_corpus(rig, 12, 7, tmp_path / "b", duration=0.5)
    assert m1.read_bytes() == m2.read_bytes()
    assert _tree_hash(tmp_path / "a") == _tree_hash(tmp_path / "b")
    for r in recs:
        text = (tmp_path / "a" / r["labels"]).read_text()
        from avasdl.labels import labels_to_csv
        assert labels_to_csv(parse_labels(text)) == text


def test_generate_corpus_errors(tmp_path, rig):
    with pytest.raises(SceneError):
        generate_corpus(rig, 0, 1, tmp_path)
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(SceneError):
        generate_corpus(rig, 1, 1, blocker / "sub", duration=0.5)
