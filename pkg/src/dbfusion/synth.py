"""Procedural scenes with shapes and glyph text, plus rule-derived captions and Q/A pairs."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import io
from .errors import IngestionError, SceneSpecError
from .font import ALPHABET, FONT, GLYPH_H, GLYPH_W, text_width

log = logging.getLogger(__name__)

IMAGE_SIZE = 64
KINDS = ("square", "circle", "triangle")
PALETTE = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
    "white": (1.0, 1.0, 1.0),
    "orange": (1.0, 0.5, 0.0),
}
BACKGROUNDS = {"black": (0.0, 0.0, 0.0), "gray": (0.5, 0.5, 0.5)}
MAX_SHAPES, MAX_GLYPHS, MAX_GLYPH_LEN = 4, 2, 6
TEXT_TAG, MULTI_TAG = "text", "multi-object"


@dataclass
class Shape:
    kind: str
    color: str
    bbox: tuple[int, int, int, int]  # x1, y1, x2, y2; half-open


@dataclass
class Glyphs:
    text: str
    pos: tuple[int, int]  # x, y of the top-left pixel
    color: str


@dataclass
class SceneSpec:
    shapes: list[Shape] = field(default_factory=list)
    glyphs: list[Glyphs] = field(default_factory=list)
    background: str = "black"
    seed: int = 0
    size: int = IMAGE_SIZE

    def validate(self) -> None:
        if len(self.shapes) > MAX_SHAPES:
            raise SceneSpecError(f"{len(self.shapes)} shapes, at most {MAX_SHAPES}")
        if len(self.glyphs) > MAX_GLYPHS:
            raise SceneSpecError(f"{len(self.glyphs)} glyph strings, at most {MAX_GLYPHS}")
        if self.background not in BACKGROUNDS:
            raise SceneSpecError(f"unknown background {self.background!r}")
        for s in self.shapes:
            x1, y1, x2, y2 = s.bbox
            if s.kind not in KINDS or s.color not in PALETTE:
                raise SceneSpecError(f"bad shape {s}")
            if not (0 <= x1 < x2 <= self.size and 0 <= y1 < y2 <= self.size):
                raise SceneSpecError(f"bbox {s.bbox} outside the {self.size}px image")
        for g in self.glyphs:
            if not 1 <= len(g.text) <= MAX_GLYPH_LEN or any(c not in FONT for c in g.text):
                raise SceneSpecError(f"bad glyph string {g.text!r}")
            if g.color not in PALETTE:
                raise SceneSpecError(f"bad glyph color {g.color!r}")
            x, y = g.pos
            if x < 0 or y < 0 or x + text_width(g.text) > self.size or y + GLYPH_H > self.size:
                raise SceneSpecError(f"glyph string {g.text!r} at {g.pos} leaves the image")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> SceneSpec:
        return cls(
            shapes=[Shape(s["kind"], s["color"], tuple(s["bbox"])) for s in d["shapes"]],
            glyphs=[Glyphs(g["text"], tuple(g["pos"]), g["color"]) for g in d["glyphs"]],
            background=d["background"], seed=d.get("seed", 0), size=d.get("size", IMAGE_SIZE))


@dataclass
class CaptionPair:
    image: str
    caption: str
    ocr_text: str
    region_text: str


@dataclass
class InstructionPair:
    image: str
    question: str
    answer: str
    kind: str


# -- rendering -------------------------------------------------------------------
def shape_mask(shape: Shape, size: int = IMAGE_SIZE) -> np.ndarray:
    x1, y1, x2, y2 = shape.bbox
    ys, xs = np.mgrid[0:size, 0:size]
    inside = (xs >= x1) & (xs < x2) & (ys >= y1) & (ys < y2)
    if shape.kind == "square":
        return inside
    px, py = xs + 0.5, ys + 0.5
    cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
    if shape.kind == "circle":
        rx, ry = (x2 - x1) / 2, (y2 - y1) / 2
        return inside & (((px - cx) / rx) ** 2 + ((py - cy) / ry) ** 2 <= 1.0)
    # apex at top centre, base along the bottom edge
    half = (py - y1) / (y2 - y1) * (x2 - x1) / 2
    return inside & (np.abs(px - cx) <= half)


def render_scene(spec: SceneSpec) -> np.ndarray:
    """Rasterise to an (H, W, 3) float image with values in [0, 1]."""
    spec.validate()
    img = np.empty((spec.size, spec.size, 3))
    img[:] = BACKGROUNDS[spec.background]
    for s in spec.shapes:
        img[shape_mask(s, spec.size)] = PALETTE[s.color]
    for g in spec.glyphs:
        x, y = g.pos
        for i, ch in enumerate(g.text):
            x0 = x + i * (GLYPH_W + 1)
            region = img[y: y + GLYPH_H, x0: x0 + GLYPH_W]
            region[FONT[ch]] = PALETTE[g.color]
    return img


# -- ground truth -------------------------------------------------------------------
def _join(items: list[str]) -> str:
    return items[0] if len(items) == 1 else ", ".join(items[:-1]) + " and " + items[-1]


def reading_order(spec: SceneSpec) -> list[Glyphs]:
    return sorted(spec.glyphs, key=lambda g: (g.pos[1], g.pos[0]))


def caption_of(spec: SceneSpec) -> str:
    parts = [f"a {s.color} {s.kind}" for s in spec.shapes]
    body = _join(parts) if parts else "nothing"
    cap = f"{body} on {spec.background}"
    if spec.glyphs:
        cap += " with text " + ocr_of(spec)
    return cap


def ocr_of(spec: SceneSpec) -> str:
    return " ".join(g.text for g in reading_order(spec))


def bbox_str(b) -> str:
    return "({},{},{},{})".format(*b)


def regions_of(spec: SceneSpec) -> str:
    return "; ".join(f"{s.kind} at {bbox_str(s.bbox)}" for s in spec.shapes)


def instructions_of(spec: SceneSpec, image: str = "") -> list[InstructionPair]:
    """Rules: a count question always; a color question per kind that occurs once;
    a read-text question when there is text; a locate question per shape whose
    (color, kind) is unique."""
    out = [InstructionPair(image, "how many shapes?", str(len(spec.shapes)), "count")]
    kinds = [s.kind for s in spec.shapes]
    for kind in KINDS:
        if kinds.count(kind) == 1:
            s = spec.shapes[kinds.index(kind)]
            out.append(InstructionPair(image, f"what color is the {kind}?", s.color, "color"))
    if spec.glyphs:
        out.append(InstructionPair(image, "what text is shown?", ocr_of(spec), "read-text"))
    pairs = [(s.color, s.kind) for s in spec.shapes]
    for s in spec.shapes:
        if pairs.count((s.color, s.kind)) == 1:
            out.append(InstructionPair(image, f"where is the {s.color} {s.kind}?",
                                       bbox_str(s.bbox), "locate"))
    return out


def max_text_tokens() -> int:
    """Upper bound on tokenized caption or instruction length (bos and eos included)."""
    color = max(PALETTE, key=len)
    kind = max(KINDS, key=len)
    bg = max(BACKGROUNDS, key=len)
    text = ["W" * MAX_GLYPH_LEN] * MAX_GLYPHS
    caption = (_join([f"a {color} {kind}"] * MAX_SHAPES) + f" on {bg} with text " + " ".join(text))
    box = bbox_str((IMAGE_SIZE,) * 4)
    questions = [f"where is the {color} {kind}? " + box, "what text is shown? " + " ".join(text),
                 f"what color is the {kind}? " + color, "how many shapes? " + str(MAX_SHAPES)]
    return max(len(s) for s in [caption] + questions) + 2


def tags_of(spec: SceneSpec) -> list[str]:
    tags = []
    if spec.glyphs:
        tags.append(TEXT_TAG)
    if len(spec.shapes) >= 3:
        tags.append(MULTI_TAG)
    return tags


# -- sampling -----------------------------------------------------------------------
DEFAULT_MIX = (1.0, 1.0, 1.0)


def _normalize_mix(mix) -> np.ndarray:
    w = np.asarray(mix if mix is not None else DEFAULT_MIX, dtype=np.float64)
    if w.shape != (len(KINDS),) or (w < 0).any() or w.sum() <= 0:
        raise ValueError(f"mix must be {len(KINDS)} nonnegative weights, not all zero: {mix}")
    return w / w.sum()


def sample_scene(seed: int, index: int, mix=None, size: int = IMAGE_SIZE) -> SceneSpec:
    """Scene ``index`` of the stream ``seed``; a pure function of its arguments."""
    p = _normalize_mix(mix)
    rng = np.random.default_rng([seed, index])
    background = str(rng.choice(sorted(BACKGROUNDS)))
    colors = sorted(PALETTE)
    shapes = []
    for _ in range(int(rng.integers(1, MAX_SHAPES + 1))):
        kind = KINDS[int(rng.choice(len(KINDS), p=p))]
        side = int(rng.integers(12, 25))
        x1 = int(rng.integers(0, size - side + 1))
        y1 = int(rng.integers(0, size - side + 1))
        shapes.append(Shape(kind, colors[int(rng.integers(len(colors)))],
                            (x1, y1, x1 + side, y1 + side)))
    glyphs = []
    n_glyphs = int(rng.choice(3, p=[0.5, 0.3, 0.2]))
    for _ in range(n_glyphs):
        length = int(rng.integers(2, MAX_GLYPH_LEN + 1))
        text = "".join(ALPHABET[int(i)] for i in rng.integers(len(ALPHABET), size=length))
        x = int(rng.integers(0, size - text_width(text) + 1))
        y = int(rng.integers(0, size - GLYPH_H + 1))
        glyphs.append(Glyphs(text, (x, y), colors[int(rng.integers(len(colors)))]))
    spec = SceneSpec(shapes, glyphs, background, seed=seed, size=size)
    spec.validate()
    return spec


@dataclass
class Record:
    id: str
    image: np.ndarray
    caption: CaptionPair
    instructions: list[InstructionPair]
    scene: SceneSpec
    tags: list[str]

    def __iter__(self):
        return iter((self.image, self.caption, self.instructions))


def make_record(seed: int, index: int, mix=None) -> Record:
    spec = sample_scene(seed, index, mix)
    rid = f"{index:06d}"
    path = f"images/{rid}.dbft"
    cap = CaptionPair(path, caption_of(spec), ocr_of(spec), regions_of(spec))
    return Record(rid, render_scene(spec), cap, instructions_of(spec, path), spec, tags_of(spec))


def generate_records(n: int, seed: int = 0, mix=None) -> list[Record]:
    if n < 1:
        raise ValueError("n must be >= 1")
    _normalize_mix(mix)
    return [make_record(seed, i, mix) for i in range(n)]


def generate_dataset(n: int, seed: int, out_dir, mix=None) -> Path:
    """Write ``images/*.dbft`` and ``manifest.jsonl`` under ``out_dir``; returns the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.jsonl"
    lines = []
    for rec in generate_records(n, seed, mix):
        blob = io.encode_tensor(rec.image)
        (out / rec.caption.image).write_bytes(blob)
        lines.append(json.dumps({
            "id": rec.id,
            "image": rec.caption.image,
            "caption": rec.caption.caption,
            "ocr_text": rec.caption.ocr_text,
            "region_text": rec.caption.region_text,
            "instructions": [{"question": q.question, "answer": q.answer, "kind": q.kind}
                             for q in rec.instructions],
            "tags": rec.tags,
            "sha256": hashlib.sha256(blob).hexdigest(),
            "scene": rec.scene.to_dict(),
        }, sort_keys=True))
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def _resolve_manifest(path) -> Path:
    p = Path(path)
    return p / "manifest.jsonl" if p.is_dir() else p


def load_dataset(path, permissive: bool = False, errors: list | None = None) -> Iterator[Record]:
    """Yield records in manifest order.

    In permissive mode a broken record is logged (and appended to ``errors``)
    and skipped; otherwise the first one raises ``IngestionError``.
    """
    manifest = _resolve_manifest(path)
    if not manifest.exists():
        raise IngestionError(f"manifest {manifest} not found")
    root = manifest.parent
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = _load_record(root, line, lineno)
        except IngestionError as exc:
            if not permissive:
                raise
            log.warning("skipping record: %s", exc)
            if errors is not None:
                errors.append(exc)
            continue
        yield rec


def _load_record(root: Path, line: str, lineno: int) -> Record:
    try:
        d = json.loads(line)
        rid, rel = d["id"], d["image"]
    except (json.JSONDecodeError, KeyError) as exc:
        raise IngestionError(f"manifest line {lineno}: malformed record ({exc})", lineno) from None
    try:
        blob = (root / rel).read_bytes()
    except OSError as exc:
        raise IngestionError(f"record {rid}: cannot read {rel} ({exc.strerror})", rid) from None
    if hashlib.sha256(blob).hexdigest() != d.get("sha256"):
        raise IngestionError(f"record {rid}: checksum mismatch for {rel}", rid)
    try:
        img, end = io.decode_tensor(blob)
    except IngestionError as exc:
        raise IngestionError(f"record {rid}: {exc}", rid) from None
    if img.ndim != 3 or img.shape[2] != 3:
        raise IngestionError(f"record {rid}: image shape {img.shape} is not HxWx3", rid)
    cap = CaptionPair(rel, d["caption"], d["ocr_text"], d["region_text"])
    ins = [InstructionPair(rel, q["question"], q["answer"], q["kind"]) for q in d["instructions"]]
    scene = SceneSpec.from_dict(d["scene"]) if "scene" in d else None
    return Record(rid, img, cap, ins, scene, list(d.get("tags", [])))


def manifest_hash(path) -> str:
    return hashlib.sha256(_resolve_manifest(path).read_bytes()).hexdigest()
