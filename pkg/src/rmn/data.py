"""Feature files, caption corpora, vocabularies and the synthetic corpus."""

from __future__ import annotations

import re
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from rmn.selector import ModuleKind

MAX_CAPTION_WORDS = 26

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")

FEATURE_MAGIC = b"RMNF"
FEATURE_VERSION = 1
FEATURE_NAMES = ("va", "vo", "vm")


class BadMagic(ValueError):
    pass


class ShapeHeaderMismatch(ValueError):
    pass


class TruncatedPayload(ValueError):
    pass


class EmptyCorpus(ValueError):
    pass


class EmptyPool(ValueError):
    pass


class CaptionTooLong(ValueError):
    pass


# ---------------------------------------------------------------------------
# text
# ---------------------------------------------------------------------------

_NOT_ALLOWED = re.compile(r"[^a-z0-9 ]")


def normalize_word(word: str) -> str:
    return _NOT_ALLOWED.sub("", word.lower())


def tokenize(raw: str) -> list:
    """Lower-case, drop everything outside ``[a-z0-9 ]``, split, keep 26 words."""
    words = (normalize_word(w) for w in raw.split())
    return [w for w in words if w][:MAX_CAPTION_WORDS]


def detokenize(tokens) -> str:
    return " ".join(tokens)


def pos_to_module(tag: str) -> ModuleKind:
    """Nouns and adjectives -> Locate, verbs -> Relate, anything else -> Func."""
    tag = tag.strip().upper()
    if tag.startswith(("NN", "JJ")):
        return ModuleKind.LOCATE
    if tag.startswith("VB"):
        return ModuleKind.RELATE
    return ModuleKind.FUNC


class Vocabulary:
    def __init__(self, tokens=()):
        self.itos = list(RESERVED)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        for tok in tokens:
            if tok in self.stoi:
                raise ValueError(f"duplicate token {tok!r}")
            self.stoi[tok] = len(self.itos)
            self.itos.append(tok)

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def token(self, idx: int) -> str:
        return self.itos[idx]

    def encode(self, tokens) -> list:
        return [BOS] + [self.id(t) for t in tokens] + [EOS]

    def decode(self, ids, strip: bool = True) -> list:
        out = []
        for i in ids:
            i = int(i)
            if strip and i in (PAD, BOS):
                continue
            if strip and i == EOS:
                break
            out.append(self.itos[i])
        return out

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.itos[len(RESERVED):]), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln])


def build_vocab(captions, min_count: int = 1) -> Vocabulary:
    """Keep tokens seen at least ``min_count`` times; ids by (count desc, token asc)."""
    counts = Counter()
    n = 0
    for cap in captions:
        toks = cap if isinstance(cap, (list, tuple)) else tokenize(cap)
        counts.update(toks)
        n += 1
    if n == 0:
        raise EmptyCorpus("cannot build a vocabulary from no captions")
    kept = [t for t, c in counts.items() if c >= min_count and t not in RESERVED]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocabulary(kept)


# ---------------------------------------------------------------------------
# captions
# ---------------------------------------------------------------------------

@dataclass
class CaptionSample:
    video_id: str
    tokens: list                      # ids, <bos> ... <eos>
    module_labels: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.module_labels) != len(self.tokens) - 2:
            raise ValueError(
                f"{self.video_id}: {len(self.module_labels)} labels for {len(self.tokens) - 2} words"
            )
        if len(self.tokens) - 2 > MAX_CAPTION_WORDS:
            raise CaptionTooLong(f"{self.video_id}: caption longer than {MAX_CAPTION_WORDS} words")

    @property
    def length(self) -> int:
        return len(self.tokens) - 2


@dataclass
class CaptionRecord:
    """One line of the caption corpus: raw text plus tagger output."""

    video_id: str
    caption: str
    pos_tags: list

    def words_and_labels(self):
        raw = self.caption.split()
        if len(raw) != len(self.pos_tags):
            raise ValueError(
                f"{self.video_id}: {len(raw)} words but {len(self.pos_tags)} POS tags"
            )
        words, labels = [], []
        for w, tag in zip(raw, self.pos_tags):
            w = normalize_word(w)
            if w:
                words.append(w)
                labels.append(pos_to_module(tag))
        return words[:MAX_CAPTION_WORDS], labels[:MAX_CAPTION_WORDS]

    def to_sample(self, vocab: Vocabulary) -> CaptionSample:
        words, labels = self.words_and_labels()
        return CaptionSample(self.video_id, vocab.encode(words), labels)


def read_corpus(path) -> list:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            records.append(CaptionRecord(parts[0], parts[1], parts[2].split()))
    return records


def write_corpus(path, records) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(f"{r.video_id}\t{r.caption}\t{' '.join(r.pos_tags)}\n")


# ---------------------------------------------------------------------------
# feature files
# ---------------------------------------------------------------------------

@dataclass
class RawFeatures:
    """Un-processed features of one video: va (N x d_a), vo (N x R x d_o), vm (N x d_m)."""

    va: np.ndarray
    vo: np.ndarray
    vm: np.ndarray

    def __post_init__(self):
        if self.va.ndim != 2 or self.vo.ndim != 3 or self.vm.ndim != 2:
            raise ShapeHeaderMismatch(
                f"expected ranks 2/3/2, got {self.va.ndim}/{self.vo.ndim}/{self.vm.ndim}"
            )
        n = {self.va.shape[0], self.vo.shape[0], self.vm.shape[0]}
        if len(n) != 1:
            raise ShapeHeaderMismatch(
                f"frame counts differ: va {self.va.shape[0]}, vo {self.vo.shape[0]}, vm {self.vm.shape[0]}"
            )

    @property
    def N(self) -> int:
        return self.va.shape[0]

    @property
    def R(self) -> int:
        return self.vo.shape[1]


def encode_features(feats: RawFeatures) -> bytes:
    parts = [FEATURE_MAGIC, struct.pack("<I", FEATURE_VERSION)]
    for name in FEATURE_NAMES:
        arr = np.asarray(getattr(feats, name))
        raw = name.encode("ascii")
        parts.append(struct.pack("<B", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_features(buf: bytes) -> RawFeatures:
    if buf[:4] != FEATURE_MAGIC:
        raise BadMagic("not an RMNF feature file")
    try:
        (version,) = struct.unpack_from("<I", buf, 4)
        if version != FEATURE_VERSION:
            raise BadMagic(f"unsupported feature file version {version}")
        off = 8
        arrays = {}
        for expected in FEATURE_NAMES:
            (n,) = struct.unpack_from("<B", buf, off)
            name = buf[off + 1:off + 1 + n].decode("ascii")
            off += 1 + n
            if name != expected:
                raise ShapeHeaderMismatch(f"expected tensor {expected!r}, found {name!r}")
            (rank,) = struct.unpack_from("<B", buf, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            if off + 4 * size > len(buf):
                raise TruncatedPayload(f"{name}: payload needs {4 * size} bytes, {len(buf) - off} left")
            arrays[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(dims).copy()
            off += 4 * size
    except struct.error as exc:
        raise TruncatedPayload(str(exc)) from None
    if off != len(buf):
        raise TruncatedPayload(f"{len(buf) - off} trailing bytes")
    return RawFeatures(arrays["va"], arrays["vo"], arrays["vm"])


def write_features(path, feats: RawFeatures) -> None:
    Path(path).write_bytes(encode_features(feats))


def load_features(path) -> RawFeatures:
    return decode_features(Path(path).read_bytes())


def load_feature_dir(directory, video_ids) -> dict:
    directory = Path(directory)
    return {vid: load_features(directory / f"{vid}.rmnf") for vid in video_ids}


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

SYNTH_TEMPLATE = ("a", "{subj}", "is", "{verb}", "a", "{obj}")
# "is" carries the auxiliary tag so the template stays Func/Locate/Func/Relate/Func/Locate
SYNTH_TAGS = ("DT", "NN", "AUX", "VBG", "DT", "NN")


@dataclass
class SyntheticGrammar:
    subjects: tuple = ("man", "woman", "dog", "boy", "girl")
    verbs: tuple = ("riding", "playing", "pushing", "holding", "washing")
    objects: tuple = ("horse", "guitar", "car", "ball", "bike")
    sigma: float = 0.0
    n_frames: int = 4
    n_regions: int = 3
    d_a: int = 16
    d_o: int = 16
    d_m: int = 16

    def check(self) -> None:
        for name in ("subjects", "verbs", "objects"):
            if not getattr(self, name):
                raise EmptyPool(f"synthetic grammar has no {name}")
        if self.n_regions < 2:
            raise ValueError("need at least two regions per frame (subject and object)")


@dataclass
class SyntheticVideo:
    video_id: str
    features: RawFeatures
    record: CaptionRecord
    triple: tuple


def _class_means(rng, pools: dict, dim: int) -> dict:
    means = {}
    for kind, words in pools.items():
        for w in words:
            v = rng.standard_normal(dim)
            means[(kind, w)] = v / np.linalg.norm(v) * np.sqrt(dim) * 0.5
    return means


def synth_generate(grammar: SyntheticGrammar, n_videos: int, seed: int = 0) -> list:
    """Deterministic toy corpus: each video shows a (subject, verb, object) triple.

    Region features carry subject/object class means at random region slots,
    motion features carry the verb mean, appearance mixes subject and object;
    all with Gaussian noise of scale ``grammar.sigma``.
    """
    grammar.check()
    rng = np.random.default_rng(seed)
    g = grammar
    obj_means, app_means, motion_means = _all_means(rng, g)
    videos = []
    for k in range(n_videos):
        subj = g.subjects[rng.integers(len(g.subjects))]
        verb = g.verbs[rng.integers(len(g.verbs))]
        obj = g.objects[rng.integers(len(g.objects))]
        vo = np.tile(obj_means[("bg", "bg")], (g.n_frames, g.n_regions, 1))
        for n in range(g.n_frames):
            slots = rng.permutation(g.n_regions)[:2]
            vo[n, slots[0]] = obj_means[("s", subj)]
            vo[n, slots[1]] = obj_means[("o", obj)]
        va = np.tile(0.5 * (app_means[("s", subj)] + app_means[("o", obj)]), (g.n_frames, 1))
        vm = np.tile(motion_means[("v", verb)], (g.n_frames, 1))
        if g.sigma > 0:
            vo = vo + g.sigma * rng.standard_normal(vo.shape)
            va = va + g.sigma * rng.standard_normal(va.shape)
            vm = vm + g.sigma * rng.standard_normal(vm.shape)
        feats = RawFeatures(va.astype(np.float32), vo.astype(np.float32), vm.astype(np.float32))
        words = [w.format(subj=subj, verb=verb, obj=obj) for w in SYNTH_TEMPLATE]
        vid = f"video{k:04d}"
        videos.append(SyntheticVideo(vid, feats, CaptionRecord(vid, " ".join(words), list(SYNTH_TAGS)),
                                     (subj, verb, obj)))
    return videos


def synth_class_means(grammar: SyntheticGrammar, seed: int = 0) -> tuple:
    """The class means ``synth_generate`` uses for a given seed (object, appearance, motion)."""
    return _all_means(np.random.default_rng(seed), grammar)


def _all_means(rng, g: SyntheticGrammar) -> tuple:
    obj_means = _class_means(rng, {"s": g.subjects, "o": g.objects, "bg": ("bg",)}, g.d_o)
    app_means = _class_means(rng, {"s": g.subjects, "o": g.objects}, g.d_a)
    motion_means = _class_means(rng, {"v": g.verbs}, g.d_m)
    return obj_means, app_means, motion_means


def write_dataset(out_dir, videos, vocab: Vocabulary) -> None:
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    for v in videos:
        write_features(out / "features" / f"{v.video_id}.rmnf", v.features)
    write_corpus(out / "captions.tsv", [v.record for v in videos])
    vocab.save(out / "vocab.txt")


@dataclass
class Dataset:
    vocab: Vocabulary
    samples: list
    features: dict

    def references(self) -> dict:
        refs = {}
        for s in self.samples:
            refs.setdefault(s.video_id, []).append(self.vocab.decode(s.tokens))
        return refs

    def video_ids(self) -> list:
        seen = {}
        for s in self.samples:
            seen.setdefault(s.video_id, None)
        return list(seen)


def load_dataset(data_dir, vocab_path=None) -> Dataset:
    data_dir = Path(data_dir)
    if not (data_dir / "features").is_dir():
        raise FileNotFoundError(f"feature directory {data_dir / 'features'} not found")
    records = read_corpus(data_dir / "captions.tsv")
    vocab_path = Path(vocab_path) if vocab_path else data_dir / "vocab.txt"
    vocab = Vocabulary.load(vocab_path)
    samples = [r.to_sample(vocab) for r in records]
    ids = list(dict.fromkeys(r.video_id for r in records))
    return Dataset(vocab, samples, load_feature_dir(data_dir / "features", ids))


def dataset_from_videos(videos, min_count: int = 1) -> Dataset:
    records = [v.record for v in videos]
    vocab = build_vocab([r.words_and_labels()[0] for r in records], min_count)
    return Dataset(vocab, [r.to_sample(vocab) for r in records],
                   {v.video_id: v.features for v in videos})
