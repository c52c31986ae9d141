import numpy as np
import pytest
from scipy.io import wavfile

from avasdl.audio_io import AudioFormatError, read_blob, read_wav, write_blob, write_wav
from avasdl.labels import (
    LABEL_HEADER, PREDICTION_HEADER, FrameLabel, FramePrediction, LabelFormatError, labels_to_csv,
    parse_labels, parse_predictions, predictions_to_csv,
)


def test_wav_float32_round_trip(tmp_path):
    x = np.random.default_rng(0).uniform(-0.5, 0.5, (16, 4800))
    write_wav(tmp_path / "a.wav", x, 48000)
    y, sr = read_wav(tmp_path / "a.wav")
    assert sr == 48000 and y.shape == (16, 4800)
    assert np.allclose(y, x.astype(np.float32), atol=0)


def test_wav_int16(tmp_path):
    x = np.random.default_rng(1).uniform(-0.5, 0.5, (16, 480))
    write_wav(tmp_path / "a.wav", x, 48000, "int16")
    y, _ = read_wav(tmp_path / "a.wav")
    assert np.max(np.abs(y - x)) <= 0.5 / 32768 + 1e-12


def test_wav_24bit(tmp_path):
    # hand-built 24-bit PCM file: 2 channels, 3 frames
    vals = np.array([[0, 4194304, -8388608], [1, -1, 8388607]])  # ints in 24-bit range
    frames = b"".join(int(v).to_bytes(3, "little", signed=True) for v in vals.T.ravel())
    import struct
    fmt = struct.pack("<HHIIHH", 1, 2, 48000, 48000 * 6, 6, 24)
    data = b"RIFF" + struct.pack("<I", 4 + 8 + len(fmt) + 8 + len(frames)) + b"WAVE"
    data += b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(frames)) + frames
    (tmp_path / "b.wav").write_bytes(data)
    y, sr = read_wav(tmp_path / "b.wav")
    assert sr == 48000
    assert np.allclose(y, vals / 2**23, atol=0)


def test_wav_rejects_unsupported(tmp_path):
    wavfile.write(str(tmp_path / "u8.wav"), 48000, np.zeros((10, 2), np.uint8))
    with pytest.raises(AudioFormatError):
        read_wav(tmp_path / "u8.wav")
    (tmp_path / "junk.wav").write_bytes(b"not a wav")
    with pytest.raises(AudioFormatError):
        read_wav(tmp_path / "junk.wav")


@pytest.mark.parametrize("dtype", ["<f4", "<f8", "<i2", "|b1"])
def test_blob_round_trip(tmp_path, dtype):
    a = (np.random.default_rng(0).standard_normal((3, 4, 5)) * 10).astype(dtype)
    write_blob(tmp_path / "x.bin", a)
    b = read_blob(tmp_path / "x.bin")
    assert b.dtype == a.dtype and np.array_equal(a, b)


def test_blob_header_layout(tmp_path):
    write_blob(tmp_path / "x.bin", np.zeros((2, 3), "<f4"))
    buf = (tmp_path / "x.bin").read_bytes()
    assert buf[:8] == b"ASDLARR1"
    assert buf[8] == 3 and buf[9:12] == b"<f4" and buf[12] == 2
    assert buf[13:21] == (2).to_bytes(4, "little") + (3).to_bytes(4, "little")
    assert len(buf) == 21 + 24


def test_blob_rejects_truncated(tmp_path):
    write_blob(tmp_path / "x.bin", np.zeros(10))
    (tmp_path / "y.bin").write_bytes((tmp_path / "x.bin").read_bytes()[:-3])
    with pytest.raises(AudioFormatError):
        read_blob(tmp_path / "y.bin")
    (tmp_path / "z.bin").write_bytes(b"garbage!")
    with pytest.raises(AudioFormatError):
        read_blob(tmp_path / "z.bin")


def test_labels_round_trip():
    labels = [FrameLabel(0, 0, False), FrameLabel(1, 0, True, 0.25, 612.0), FrameLabel(1, 3, True, 0.1)]
    text = labels_to_csv(labels)
    assert text.splitlines()[0] == ",".join(LABEL_HEADER)
    assert parse_labels(text) == labels


def test_predictions_round_trip():
    preds = [FramePrediction(0, 5, 0.5, 0.1), FramePrediction(1, 5, 1 / 3, 0.999)]
    text = predictions_to_csv(preds)
    assert text.splitlines()[0] == ",".join(PREDICTION_HEADER)
    assert parse_predictions(text) == preds


def test_label_invariants():
    with pytest.raises(LabelFormatError):
        FrameLabel(0, 0, False, 0.5)
    with pytest.raises(LabelFormatError):
        FrameLabel(0, 0, True, 1.5)
    with pytest.raises(LabelFormatError):
        FramePrediction(0, 0, 0.5, 1.2)


def test_malformed_line_reports_line_number():
    text = "frame_index,camera_id,x_pred_norm,confidence\n0,0,0.5,0.5\n1,0,abc,0.5\n"
    with pytest.raises(LabelFormatError, match=":3"):
        parse_predictions(text, "p.csv")
    with pytest.raises(LabelFormatError):
        parse_predictions("a,b\n1,2\n")
