"""Best-effort adapter for a recorded multi-camera / 16-mic corpus.

Expected layout (one directory per sequence)::

    <root>/<sequence>/audio.wav          16-channel, 48 kHz
    <root>/<sequence>/faces.csv          frame,camera,active,face_x,face_w[,mouth_x]
    <root>/test_sequences.txt            optional, one sequence name per line

``face_x``/``face_w`` are pixel left edge and width of the speaker's face box;
``mouth_x`` (pixels) is optional and left empty when unknown.  Sequences
listed in ``test_sequences.txt`` go to the test split, the rest to train.
The output mirrors a simulated corpus (audio + labels + manifest) without
visual observations.
"""

from __future__ import annotations

import csv
import json
import logging
import shutil
from pathlib import Path

from . import audio_io
from .labels import FrameLabel, labels_to_csv

log = logging.getLogger(__name__)

FACE_COLUMNS = ("frame", "camera", "active", "face_x", "face_w")


class IngestError(RuntimeError):
    pass


def _truthy(v: str) -> bool:
    return v.strip().lower() in ("1", "true", "yes")


def read_face_csv(path: Path, image_width: int) -> tuple[list[FrameLabel], int]:
    """Labels from a face-box CSV; also returns how many active rows lack mouth_x.

    Malformed rows are logged and skipped.
    """
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in FACE_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise IngestError(f"{path}: missing columns {missing}")
        labels, no_mouth = [], 0
        for line, row in enumerate(reader, start=2):
            try:
                frame, cam = int(row["frame"]), int(row["camera"])
                if not _truthy(row["active"]):
                    labels.append(FrameLabel(frame, cam, False))
                    continue
                centre = float(row["face_x"]) + float(row["face_w"]) / 2
                mouth = (row.get("mouth_x") or "").strip()
                if not mouth:
                    no_mouth += 1
                labels.append(FrameLabel(frame, cam, True, min(max(centre / image_width, 0.0), 1.0),
                                         float(mouth) if mouth else None))
            except (ValueError, TypeError) as exc:
                log.warning("%s:%d: skipping malformed row (%s)", path, line, exc)
    return labels, no_mouth


def ingest_corpus(root: str | Path, out_dir: str | Path, image_width: int = 2448) -> Path:
    """Convert a recorded corpus into the package layout; returns the manifest path."""
    root, out = Path(root), Path(out_dir)
    if not root.is_dir():
        raise IngestError(f"{root} is not a directory")
    test_list = root / "test_sequences.txt"
    test = set(test_list.read_text().split()) if test_list.exists() else set()
    seqs = sorted(p for p in root.iterdir() if p.is_dir())
    if not seqs:
        raise IngestError(f"{root}: no sequence directories")
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for seq in seqs:
        wav, faces = seq / "audio.wav", seq / "faces.csv"
        if not wav.exists() or not faces.exists():
            log.warning("skipping %s: needs audio.wav and faces.csv", seq.name)
            continue
        try:
            samples, sr = audio_io.read_wav(wav)
        except audio_io.AudioFormatError as exc:
            log.warning("skipping %s: %s", seq.name, exc)
            continue
        if samples.shape[0] != 16 or sr != 48000:
            log.warning("skipping %s: expected 16 channels at 48 kHz, got %d at %d", seq.name, samples.shape[0], sr)
            continue
        labels, no_mouth = read_face_csv(faces, image_width)
        if no_mouth:
            log.warning("%s: %d active frames without mouth_x; localization error will use the face centre",
                        seq.name, no_mouth)
        dst = out / seq.name
        dst.mkdir(exist_ok=True)
        shutil.copyfile(wav, dst / "audio.wav")
        (dst / "labels.csv").write_text(labels_to_csv(labels))
        records.append({"scene_id": seq.name, "split": "test" if seq.name in test else "train",
                        "audio": f"{seq.name}/audio.wav", "labels": f"{seq.name}/labels.csv"})
    if not records:
        raise IngestError(f"{root}: no usable sequences")
    manifest = out / "manifest.jsonl"
    manifest.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
    return manifest


ingest_tragictalkers = ingest_corpus
