"""Prompt building and text-generation plumbing for caption augmentation."""

from __future__ import annotations

import json
import math
import os
import urllib.error
import urllib.request
import warnings
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .autodiff import derive_seed

Array = np.ndarray


# ----------------------------------------------------------------------
# Prompt template

@dataclass(frozen=True)
class PromptTemplate:
    """Noun-first prompt layout with a reversible separator."""

    separator: str = ". "

    def __post_init__(self) -> None:
        if not self.separator:
            raise ValueError("separator must be nonempty")


DEFAULT_TEMPLATE = PromptTemplate()


def build_prompt(noun: str, sentence: str | None = None,
                 template: PromptTemplate = DEFAULT_TEMPLATE) -> str:
    """Format the object noun, then the sentence when one is present."""
    if not noun:
        raise ValueError("noun must be nonempty")
    if template.separator in noun:
        raise ValueError("noun may not contain the prompt separator")
    if sentence is None:
        return noun
    return noun + template.separator + sentence


def parse_prompt(text: str,
                 template: PromptTemplate = DEFAULT_TEMPLATE) -> tuple[str, str | None]:
    """Invert build_prompt; the first separator splits noun from sentence."""
    if template.separator in text:
        noun, sentence = text.split(template.separator, 1)
        return noun, sentence
    return text, None


# ----------------------------------------------------------------------
# Generation clients

class GenerationError(RuntimeError):
    """Generation failed; carries whatever was produced before the failure."""

    def __init__(self, message: str, partial: Sequence[str] = ()) -> None:
        super().__init__(message)
        self.partial = list(partial)


class GenerationClient:
    """Single-owner generation session with per-noun history."""

    def __init__(self, timeout: float = 10.0, retries: int = 2) -> None:
        self.timeout = float(timeout)
        self.retries = int(retries)
        self.history: list[str] = []
        self._noun: str | None = None

    def begin_noun(self, noun: str) -> None:
        """Start (or continue) the session for a noun; a new noun resets history."""
        if noun != self._noun:
            self._noun = noun
            self.history = []
            self._session_reset()

    def _session_reset(self) -> None:
        pass

    def generate_sentence(self, noun: str) -> str:
        raise NotImplementedError

    def generate_noun(self, sentence: str) -> str:
        raise NotImplementedError


STUB_SENTENCE_BANK = (
    "Where is the {noun}?",
    "I am looking for a {noun}.",
    "Can you find the {noun}?",
    "Please take me to the {noun}.",
    "Is there a {noun} nearby?",
    "Show me where the {noun} is.",
    "I need to use the {noun}.",
    "Guide me to the {noun}.",
    "Do you see a {noun} around here?",
    "Head over to the {noun}.",
    "I want to check on the {noun}.",
    "Which way is the {noun}?",
)

_STOPWORDS = frozenset(
    "the a an is are was were am i you we my your me it this that of to in on "
    "at for with and or where what which how who can could would please there "
    "here nearby around down up".split())


class StubGenerationClient(GenerationClient):
    """Offline client: fixed template bank, then seeded numbered variations."""

    def __init__(self, seed: int = 0, timeout: float = 10.0, retries: int = 2) -> None:
        super().__init__(timeout=timeout, retries=retries)
        self.seed = int(seed)
        self._variation = 0

    def _session_reset(self) -> None:
        self._variation = 0

    def generate_sentence(self, noun: str) -> str:
        for template in STUB_SENTENCE_BANK:
            sentence = template.format(noun=noun)
            if sentence not in self.history:
                return sentence
        # Bank exhausted: numbered variations, offset by the session seed so
        # different seeds diverge while the same seed replays exactly.
        base = derive_seed(self.seed, "variation", 0) % 1000
        self._variation += 1
        return f"Tell me where the {noun} is, variation {base + self._variation}."

    def generate_noun(self, sentence: str) -> str:
        if not sentence:
            raise GenerationError("empty sentence")
        tokens = [t.strip(".,!?;:'\"()") for t in sentence.split()]
        words = [t for t in tokens if t and t.replace("-", "").isalpha()]
        content = [w for w in words if w.lower() not in _STOPWORDS]
        if content:
            return content[-1].lower()
        if words:
            return words[-1].lower()
        raise GenerationError(f"no noun-like token in {sentence!r}")


class LiveGenerationClient(GenerationClient):
    """Minimal chat-completion client over HTTP; transport is injectable."""

    def __init__(self, endpoint: str, api_key: str = "", model: str = "default",
                 timeout: float = 10.0, retries: int = 2,
                 transport: Callable[[dict], str] | None = None) -> None:
        super().__init__(timeout=timeout, retries=retries)
        self.endpoint = endpoint
        self.api_key = api_key
        self.model = model
        self._transport = transport or self._http_transport

    def _http_transport(self, payload: dict) -> str:
        request = urllib.request.Request(
            self.endpoint,
            data=json.dumps(payload).encode("utf-8"),
            headers={"Content-Type": "application/json",
                     **({"Authorization": f"Bearer {self.api_key}"}
                        if self.api_key else {})})
        with urllib.request.urlopen(request, timeout=self.timeout) as response:
            body = json.loads(response.read().decode("utf-8"))
        return body["choices"][0]["message"]["content"].strip()

    def _complete(self, system: str, user: str) -> str:
        payload = {"model": self.model,
                   "messages": [{"role": "system", "content": system},
                                {"role": "user", "content": user}]}
        last: Exception | None = None
        for _ in range(self.retries + 1):
            try:
                return self._transport(payload)
            except (urllib.error.URLError, TimeoutError, OSError, KeyError) as exc:
                last = exc
        raise GenerationError(f"generation request failed: {last}")

    def generate_sentence(self, noun: str) -> str:
        system = ("You write one short sentence or question a person might "
                  "say when they want to find the given object. Reply with "
                  "the sentence only, and never repeat a previous one.")
        user = f"Object: {noun}"
        if self.history:
            user += "\nPrevious generations:\n" + "\n".join(self.history)
        return self._complete(system, user)

    def generate_noun(self, sentence: str) -> str:
        if not sentence:
            raise GenerationError("empty sentence")
        system = ("Answer with the single short object noun the sentence "
                  "refers to, and nothing else.")
        return self._complete(system, sentence)


def client_from_env(offline: bool = True, seed: int = 0) -> GenerationClient:
    """Pick the stub unless offline is off and an endpoint is configured."""
    endpoint = os.environ.get("SLOTNAV_GEN_ENDPOINT", "")
    if offline or not endpoint:
        return StubGenerationClient(seed=seed)
    return LiveGenerationClient(endpoint=endpoint,
                                api_key=os.environ.get("SLOTNAV_GEN_API_KEY", ""),
                                model=os.environ.get("SLOTNAV_GEN_MODEL", "default"))


# ----------------------------------------------------------------------
# Generation operations

def noun_to_sentences(noun: str, count: int, client: GenerationClient) -> list[str]:
    """Generate count distinct sentences about the noun, tracking history."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if not noun:
        raise ValueError("noun must be nonempty")
    client.begin_noun(noun)
    out: list[str] = []
    while len(out) < count:
        sentence: str | None = None
        try:
            for _ in range(client.retries + 1):
                candidate = client.generate_sentence(noun)
                if candidate not in client.history:
                    sentence = candidate
                    break
        except GenerationError as exc:
            raise GenerationError(str(exc), partial=out) from exc
        if sentence is None:
            warnings.warn(f"dropped duplicate generations for {noun!r} after "
                          f"{client.retries + 1} attempts", stacklevel=2)
            break
        client.history.append(sentence)
        out.append(sentence)
    return out


def sentence_to_noun(sentence: str, client: GenerationClient) -> str:
    """Reduce a sentence to a short noun phrase, at most four words."""
    if not sentence:
        raise ValueError("sentence must be nonempty")
    try:
        noun = client.generate_noun(sentence)
    except GenerationError as exc:
        raise GenerationError(f"noun extraction failed for {sentence!r}: {exc}") from exc
    words = noun.split()
    return " ".join(words[:4])


# ----------------------------------------------------------------------
# Dataset records

def normalize_angle(theta: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    return math.pi - ((math.pi - theta) % (2.0 * math.pi))


@dataclass(frozen=True)
class Pose:
    """Camera pose in world meters: position and heading in radians."""

    x: float
    y: float
    theta: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "theta", normalize_angle(float(self.theta)))


@dataclass
class CaptionedObject:
    """One annotated object: noun, normalized corner box, caption list."""

    noun: str
    box: Array
    captions: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.box = np.asarray(self.box, dtype=np.float64).reshape(4)
        x1, y1, x2, y2 = self.box
        if not (0.0 <= x1 <= x2 <= 1.0 and 0.0 <= y1 <= y2 <= 1.0):
            raise ValueError(f"invalid normalized box {self.box.tolist()}")
        if not self.noun:
            raise ValueError("object noun must be nonempty")


@dataclass
class CaptionRecord:
    """One image's annotations; every object carries at least one caption."""

    image_id: str
    width: int
    height: int
    pose: Pose
    objects: list[CaptionedObject]

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        for obj in self.objects:
            if not obj.captions:
                raise ValueError(f"object {obj.noun!r} in {self.image_id!r} "
                                 "has no captions")


def record_to_json(record: CaptionRecord) -> dict:
    return {"image_id": record.image_id,
            "width": record.width,
            "height": record.height,
            "pose": {"x": record.pose.x, "y": record.pose.y,
                     "theta": record.pose.theta},
            "objects": [{"noun": o.noun,
                         "box": [float(v) for v in o.box],
                         "captions": list(o.captions)}
                        for o in record.objects]}


def record_from_json(data: dict) -> CaptionRecord:
    pose = data["pose"]
    return CaptionRecord(
        image_id=str(data["image_id"]),
        width=int(data["width"]),
        height=int(data["height"]),
        pose=Pose(x=float(pose["x"]), y=float(pose["y"]),
                  theta=float(pose["theta"])),
        objects=[CaptionedObject(noun=o["noun"],
                                 box=o["box"],
                                 captions=list(o["captions"]))
                 for o in data["objects"]])


def save_dataset(records: Sequence[CaptionRecord], path: str) -> None:
    """Write records as line-delimited JSON."""
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record_to_json(record), sort_keys=True) + "\n")


def load_dataset(path: str) -> list[CaptionRecord]:
    """Read a line-delimited JSON dataset, validating every record."""
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(record_from_json(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from exc
    return records


# ----------------------------------------------------------------------
# Detection-dataset conversion

@dataclass
class ConversionReport:
    """Converted records plus (line number, message) for skipped lines."""

    records: list[CaptionRecord]
    errors: list[tuple[int, str]]

    @property
    def generated_captions(self) -> int:
        return sum(len(o.captions) - 1
                   for r in self.records for o in r.objects)


def convert_detection_lines(lines: Iterable[str], count: int,
                            client: GenerationClient) -> ConversionReport:
    """Augment detection records (noun + box) into multi-caption records.

    Caption 0 stays the raw noun; the next count captions come from
    noun_to_sentences. Malformed lines are skipped and reported.
    """
    if count < 1:
        raise ValueError("caption count must be >= 1")
    records: list[CaptionRecord] = []
    errors: list[tuple[int, str]] = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            data = json.loads(line)
            pose = data.get("pose", {"x": 0.0, "y": 0.0, "theta": 0.0})
            objects = []
            for entry in data["objects"]:
                noun = entry["noun"]
                captions = [noun] + noun_to_sentences(noun, count, client)
                objects.append(CaptionedObject(noun=noun, box=entry["box"],
                                               captions=captions))
            records.append(CaptionRecord(
                image_id=str(data["image_id"]),
                width=int(data["width"]), height=int(data["height"]),
                pose=Pose(x=float(pose["x"]), y=float(pose["y"]),
                          theta=float(pose["theta"])),
                objects=objects))
        except (ValueError, KeyError, TypeError) as exc:
            errors.append((lineno, str(exc) or type(exc).__name__))
    return ConversionReport(records=records, errors=errors)


def convert_detection_dataset(path: str, count: int,
                              client: GenerationClient) -> ConversionReport:
    """File-path form of convert_detection_lines."""
    with open(path, "r", encoding="utf-8") as fh:
        return convert_detection_lines(fh, count, client)
