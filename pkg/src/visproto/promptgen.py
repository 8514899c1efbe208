"""Per-class prompt generation through a chat-completion endpoint.

The generator asks a language model to describe each class from coarse to
fine detail, parses the reply into exactly ``n_g`` prompt strings, and
persists them one file per prompt with a JSON sidecar for review state.
A deterministic stub provider stands in for the remote endpoint in tests.
"""

from __future__ import annotations

import json
import os
import re
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Protocol

import requests

from .workspace import atomic_write_json, atomic_write_text, read_json, sanitize_name

N_G_DEFAULT = 10

# Two-part system instruction for coarse-to-fine class descriptions. The
# first part sets the task for one class; the second steers granularity,
# adjective restraint, and continuation behavior across classes.
DESCRIPTION_INSTRUCTION = (
    "Write a detailed description of {class_name}, including its unique "
    "features. The description I need is for image generation, so the "
    "description you give must be a clear visual feature that can help the "
    "generator understand the content and reduce ambiguity to the greatest "
    "extent."
)
GRANULARITY_INSTRUCTION = (
    "Try to imitate the process of human eyes recognizing objects to "
    "classify the features of objects from coarse to fine granularity and "
    "generate prompt words. You need to estimate your own adjectives to "
    "ensure that the features generated by your adjectives in the generated "
    "image are not distorted or exaggerated. The input length should remain "
    "roughly the same, and only generate descriptions of newly updated "
    "classes each time to avoid repeating descriptions of classes that have "
    "already been generated above."
)
BASELINE_TEMPLATE = "a photo of a {class_name}"

PROMPT_STYLES = ("coarse_to_fine", "baseline")
CALIBRATION_STATES = (
    "unreviewed",
    "approved",
    "flagged_wrong_category",
    "flagged_poor_composition",
    "replaced",
)

META_FILENAME = "prompts.meta.json"


class PromptProviderError(RuntimeError):
    """Transport or provider-side failure after retries were exhausted."""


class PromptAuthError(PromptProviderError):
    """Endpoint rejected the credentials; retrying cannot help."""


class PromptFormatError(ValueError):
    """Provider response matched neither supported output format."""


def system_template_for_style(style: str) -> str:
    """The raw system template for a style, placeholder intact."""
    if style == "baseline":
        return BASELINE_TEMPLATE
    if style == "coarse_to_fine":
        return DESCRIPTION_INSTRUCTION + "\n\n" + GRANULARITY_INSTRUCTION
    raise ValueError(f"unknown prompt style {style!r}")


def build_system_prompt(class_name: str, style: str = "coarse_to_fine") -> str:
    """Compose the instruction sent as the system message.

    ``coarse_to_fine`` yields the two-part descriptive instruction with the
    class name substituted; ``baseline`` yields the plain photo template
    used by the no-language-model ablation arm.
    """
    if not class_name or not class_name.strip():
        raise ValueError("class_name must be non-empty")
    return system_template_for_style(style).replace("{class_name}", class_name)


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PromptCalibration:
    """Review state of a single prompt."""

    status: str = "unreviewed"
    replacement_text: str | None = None
    note: str | None = None
    reviewer_id: str | None = None

    def __post_init__(self) -> None:
        if self.status not in CALIBRATION_STATES:
            raise ValueError(f"unknown calibration status {self.status!r}")

    def to_json(self) -> dict:
        return {
            "status": self.status,
            "replacement_text": self.replacement_text,
            "note": self.note,
            "reviewer_id": self.reviewer_id,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "PromptCalibration":
        return cls(
            status=doc.get("status", "unreviewed"),
            replacement_text=doc.get("replacement_text"),
            note=doc.get("note"),
            reviewer_id=doc.get("reviewer_id"),
        )


@dataclass(frozen=True)
class PromptRequest:
    """What gets sent for one class: the raw template (placeholder intact,
    substituted only when messages are assembled) plus the ids of classes
    already described in this session."""

    class_name: str
    dataset_id: str
    system_template: str
    continuation_context: tuple[str, ...] = ()
    sampling: dict | None = None  # None means provider default

    def __post_init__(self) -> None:
        if not self.class_name:
            raise ValueError("class_name must be non-empty")
        if "{class_name}" not in self.system_template:
            raise ValueError("system_template lacks the {class_name} placeholder")


@dataclass(frozen=True)
class PromptSet:
    """Ordered prompts for one class, plus per-prompt review state.

    ``deficient`` marks sets that came back shorter than requested or were
    loaded from a store with missing indices; downstream stages surface the
    gap instead of quietly evaluating a thinner class.
    """

    dataset_id: str
    class_id: str
    prompts: tuple[str, ...]
    provider_id: str
    created_at: float
    expected_count: int = N_G_DEFAULT
    calibration: tuple[PromptCalibration, ...] = ()
    gaps: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if any(not p for p in self.prompts):
            raise ValueError("prompts must be non-empty strings")
        if not self.calibration:
            object.__setattr__(
                self,
                "calibration",
                tuple(PromptCalibration() for _ in self.prompts),
            )
        if len(self.calibration) != len(self.prompts):
            raise ValueError("calibration length must match prompt count")

    @property
    def deficient(self) -> bool:
        return len(self.prompts) < self.expected_count or bool(self.gaps)

    def effective_prompt(self, index: int) -> str:
        """Replacement text when present, otherwise the original prompt."""
        cal = self.calibration[index]
        if cal.replacement_text:
            return cal.replacement_text
        return self.prompts[index]

    def with_calibration(self, index: int, cal: PromptCalibration) -> "PromptSet":
        entries = list(self.calibration)
        entries[index] = cal
        return replace(self, calibration=tuple(entries))


# ---------------------------------------------------------------------------
# response parsing
# ---------------------------------------------------------------------------

_NUMBERED_LINE = re.compile(r"^\s*\d+\s*[.):]\s*(\S.*?)\s*$")


def parse_prompt_response(text: str, expected_count: int) -> list[str]:
    """Parse a provider reply into prompt strings.

    Exactly two formats are accepted: a JSON array of strings, or numbered
    lines ("1. ...", "2) ...", "3: ..."). Anything else raises
    PromptFormatError. More than ``expected_count`` parsed prompts are
    truncated; fewer are returned as-is for the caller to flag.
    """
    stripped = text.strip()
    if not stripped:
        raise PromptFormatError("empty provider response")

    prompts: list[str] | None = None
    try:
        doc = json.loads(stripped)
    except json.JSONDecodeError:
        doc = None
    if isinstance(doc, list):
        if not all(isinstance(p, str) and p.strip() for p in doc):
            raise PromptFormatError("JSON array must contain non-empty strings")
        prompts = [p.strip() for p in doc]

    if prompts is None:
        matches = [_NUMBERED_LINE.match(line) for line in stripped.splitlines()]
        prompts = [m.group(1) for m in matches if m]
        if not prompts:
            raise PromptFormatError(
                "response is neither a JSON string array nor numbered lines"
            )

    return prompts[:expected_count]


# ---------------------------------------------------------------------------
# providers
# ---------------------------------------------------------------------------

class ChatProvider(Protocol):
    provider_id: str

    def complete(self, messages: list[dict], sampling: dict | None) -> str:
        ...


class HttpChatProvider:
    """Chat-completion client over a plain JSON POST.

    Request body is {model, messages, temperature?, top_p?}. Transport
    errors and 5xx responses are retried up to ``max_retries`` times with
    exponential backoff; auth rejections fail immediately.
    """

    def __init__(
        self,
        url: str,
        api_key: str | None = None,
        model: str = "default",
        *,
        timeout: float = 60.0,
        max_retries: int = 3,
        backoff: float = 0.5,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.url = url
        self.api_key = api_key
        self.model = model
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff = backoff
        self._sleep = sleep
        self.provider_id = f"http:{model}"

    @classmethod
    def from_env(cls, **kwargs) -> "HttpChatProvider":
        url = os.environ.get("LLM_API_URL")
        if not url:
            raise PromptProviderError("LLM_API_URL is not set")
        return cls(
            url,
            api_key=os.environ.get("LLM_API_KEY"),
            model=os.environ.get("LLM_MODEL", "default"),
            **kwargs,
        )

    def complete(self, messages: list[dict], sampling: dict | None) -> str:
        body: dict = {"model": self.model, "messages": messages}
        if sampling:
            if "temperature" in sampling:
                body["temperature"] = sampling["temperature"]
            if "top_p" in sampling:
                body["top_p"] = sampling["top_p"]
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"

        last_error: Exception | None = None
        for attempt in range(self.max_retries):
            if attempt:
                self._sleep(self.backoff * (2 ** (attempt - 1)))
            try:
                resp = requests.post(
                    self.url, json=body, headers=headers, timeout=self.timeout
                )
            except requests.RequestException as exc:
                last_error = exc
                continue
            if resp.status_code in (401, 403):
                raise PromptAuthError(
                    f"chat endpoint rejected credentials ({resp.status_code})"
                )
            if resp.status_code >= 500:
                last_error = PromptProviderError(
                    f"chat endpoint returned {resp.status_code}"
                )
                continue
            if resp.status_code != 200:
                raise PromptProviderError(
                    f"chat endpoint returned {resp.status_code}: {resp.text[:200]}"
                )
            return _extract_content(resp.json())
        raise PromptProviderError(
            f"chat endpoint unreachable after {self.max_retries} attempts: "
            f"{last_error}"
        )


def _extract_content(doc: dict) -> str:
    try:
        return doc["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError):
        pass
    if isinstance(doc.get("content"), str):
        return doc["content"]
    raise PromptProviderError("chat response has no message content")


class StubChatProvider:
    """Offline provider producing deterministic numbered lines.

    ``script`` can pin exact replies per class name; otherwise each class
    gets ``n_lines`` synthesized descriptions. Useful both for tests and
    for running the pipeline with no endpoint configured.
    """

    provider_id = "stub"

    def __init__(self, n_lines: int = N_G_DEFAULT, script: dict[str, str] | None = None):
        self.n_lines = n_lines
        self.script = script or {}
        self.calls: list[list[dict]] = []

    def complete(self, messages: list[dict], sampling: dict | None) -> str:
        self.calls.append(messages)
        class_name = _class_name_from_messages(messages)
        if class_name in self.script:
            return self.script[class_name]
        lines = [
            f"{i}. a photo of a {class_name}, rendered with characteristic "
            f"detail set {i}"
            for i in range(1, self.n_lines + 1)
        ]
        return "\n".join(lines)


def _class_name_from_messages(messages: list[dict]) -> str:
    for msg in messages:
        if msg.get("role") == "system":
            m = re.search(r"Write a detailed description of (.+?), including", msg["content"])
            if m:
                return m.group(1)
            m = re.search(r"a photo of a (.+)", msg["content"])
            if m:
                return m.group(1).strip()
    return "object"


# ---------------------------------------------------------------------------
# session
# ---------------------------------------------------------------------------

class PromptSession:
    """One conversation-style pass over a dataset's classes.

    Classes are described in order; the request for each class carries the
    ids already covered so the model only describes what is new. The context
    grows strictly and never repeats a class.
    """

    def __init__(
        self,
        provider: ChatProvider,
        dataset_id: str,
        *,
        n_g: int = N_G_DEFAULT,
        style: str = "coarse_to_fine",
        sampling: dict | None = None,
    ):
        if style not in PROMPT_STYLES:
            raise ValueError(f"unknown prompt style {style!r}")
        self.provider = provider
        self.dataset_id = dataset_id
        self.n_g = n_g
        self.style = style
        self.sampling = sampling
        self.described: list[str] = []

    def build_request(self, class_name: str) -> PromptRequest:
        return PromptRequest(
            class_name=class_name,
            dataset_id=self.dataset_id,
            system_template=system_template_for_style(self.style),
            continuation_context=tuple(self.described),
            sampling=self.sampling,
        )

    def request_prompts(self, class_name: str) -> PromptSet:
        if class_name in self.described:
            raise ValueError(f"class {class_name!r} was already described")
        req = self.build_request(class_name)
        messages = build_messages(req, self.n_g)
        raw = self.provider.complete(messages, req.sampling)
        prompts = parse_prompt_response(raw, self.n_g)
        self.described.append(class_name)
        return PromptSet(
            dataset_id=self.dataset_id,
            class_id=class_name,
            prompts=tuple(prompts),
            provider_id=self.provider.provider_id,
            created_at=time.time(),
            expected_count=self.n_g,
        )


def baseline_prompt_set(
    dataset_id: str, class_name: str, n_g: int = N_G_DEFAULT
) -> PromptSet:
    """Prompt set for the no-language-model arm: the photo template
    repeated n_g times. Seeds differ per prompt number downstream, so the
    generated images still vary."""
    text = build_system_prompt(class_name, "baseline")
    return PromptSet(
        dataset_id=dataset_id,
        class_id=class_name,
        prompts=tuple(text for _ in range(n_g)),
        provider_id="template",
        created_at=0.0,
        expected_count=n_g,
    )


def build_messages(req: PromptRequest, n_g: int) -> list[dict]:
    """Assemble the chat messages for one class request."""
    system = req.system_template.replace("{class_name}", req.class_name)
    user_parts = [
        f"Dataset: {req.dataset_id}.",
    ]
    if req.continuation_context:
        user_parts.append(
            "Classes already described (do not repeat): "
            + ", ".join(req.continuation_context)
            + "."
        )
    user_parts.append(
        f"Now generate exactly {n_g} image-generation prompts for the new "
        f"class, as a JSON array of strings or as numbered lines."
    )
    return [
        {"role": "system", "content": system},
        {"role": "user", "content": " ".join(user_parts)},
    ]


# ---------------------------------------------------------------------------
# store
# ---------------------------------------------------------------------------

class PromptStore:
    """Prompt files under ``<root>/<dataset>/<class_name>/<No.>.txt``.

    No. is 1-based. Review state and provenance live in a sidecar JSON next
    to the numbered files.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def class_dir(self, dataset_id: str, class_id: str) -> Path:
        return self.root / dataset_id / sanitize_name(class_id)

    def store(self, prompt_set: PromptSet) -> Path:
        target = self.class_dir(prompt_set.dataset_id, prompt_set.class_id)
        target.mkdir(parents=True, exist_ok=True)
        for no, text in enumerate(prompt_set.prompts, start=1):
            atomic_write_text(target / f"{no}.txt", text + "\n")
        meta = {
            "dataset_id": prompt_set.dataset_id,
            "class_id": prompt_set.class_id,
            "provider_id": prompt_set.provider_id,
            "created_at": prompt_set.created_at,
            "expected_count": prompt_set.expected_count,
            "calibration": [c.to_json() for c in prompt_set.calibration],
        }
        atomic_write_json(target / META_FILENAME, meta)
        return target

    def load(self, dataset_id: str, class_id: str) -> PromptSet:
        target = self.class_dir(dataset_id, class_id)
        if not target.is_dir():
            raise FileNotFoundError(f"no stored prompts under {target}")
        numbered = {}
        for path in target.glob("*.txt"):
            if path.stem.isdigit():
                numbered[int(path.stem)] = path
        if not numbered:
            raise FileNotFoundError(f"no prompt files under {target}")

        meta_path = target / META_FILENAME
        meta = read_json(meta_path) if meta_path.exists() else {}
        expected = int(meta.get("expected_count", N_G_DEFAULT))

        ordered = sorted(numbered)
        top = max(ordered)
        gaps = tuple(
            no for no in range(1, max(top, expected) + 1) if no not in numbered
        )
        prompts = tuple(
            numbered[no].read_text(encoding="utf-8").rstrip("\n") for no in ordered
        )
        calibration_docs = meta.get("calibration", [])
        calibration = tuple(
            PromptCalibration.from_json(doc) for doc in calibration_docs
        ) or ()
        if calibration and len(calibration) != len(prompts):
            calibration = ()
        return PromptSet(
            dataset_id=meta.get("dataset_id", dataset_id),
            class_id=meta.get("class_id", class_id),
            prompts=prompts,
            provider_id=meta.get("provider_id", "unknown"),
            created_at=float(meta.get("created_at", 0.0)),
            expected_count=expected,
            calibration=calibration,
            gaps=gaps,
        )

    def exists(self, dataset_id: str, class_id: str) -> bool:
        target = self.class_dir(dataset_id, class_id)
        return target.is_dir() and any(
            p.stem.isdigit() for p in target.glob("*.txt")
        )

    def list_classes(self, dataset_id: str) -> list[str]:
        base = self.root / dataset_id
        if not base.is_dir():
            return []
        out = []
        for child in sorted(base.iterdir()):
            if child.is_dir() and (child / META_FILENAME).exists():
                meta = read_json(child / META_FILENAME)
                out.append(meta.get("class_id", child.name))
            elif child.is_dir():
                out.append(child.name)
        return out
