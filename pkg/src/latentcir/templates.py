"""The 48 keyword-conversion instruction templates.

Each template carries ``${source}`` and/or ``${target}`` slots.  The list keeps
duplicate entries so that template ids stay aligned with the published table.
"""

import re
from string import Template

TEMPLATES = (
    "replace ${source} with ${target}",
    "substitute ${target} for ${source}",
    "change ${source} to ${target}",
    "${target}",
    "${source} is removed and ${target} takes its place",
    "alter ${source} to ${target}",
    "apply ${target}",
    "modify ${source} to become ${target}",
    "swap ${source} for ${target}",
    "convert ${source} to ${target}",
    "customize ${source} to become ${target}",
    "redesign ${source} as ${target}",
    "replace ${source} with ${target}",
    "change ${source} to match ${target}",
    "turn ${source} into ${target}",
    "update ${source} to ${target}",
    "${target} is introduced after ${source} is removed",
    "adapt ${source} to fit ${target}",
    "substitute ${target} for ${source}",
    "${target} is added in place of ${source}",
    "choose ${target} instead",
    "alter ${source} to match ${target}",
    "${target} is introduced as the new option after ${source} is removed",
    "${target} is the new choice",
    "upgrade ${source} to ${target}",
    "${source} is removed and ${target} is added",
    "${target} is the new selection",
    "amend ${source} to fit ${target}",
    "${source} is removed and ${target} is introduced",
    "${target} is the new option",
    "opt for ${target}",
    "${target} is added as a replacement for ${source}",
    "use ${target} from now on",
    "${source} is removed",
    "${target} is the new option available",
    "remodel ${source} into ${target}",
    "add ${target}",
    "${target} is added after ${source} is removed",
    "revamp ${source} into ${target}",
    "if it is ${target}",
    "${target} is introduced after ${source} is retired",
    "exchange ${source} with ${target}",
    "${target} is the updated option",
    "tweak ${source} to become ${target}",
    "transform ${source} into ${target}",
    "${target} is the updated choice",
    "${source} is replaced with ${target}",
    "${target} is the updated version",
)

N_TEMPLATES = len(TEMPLATES)
assert N_TEMPLATES == 48

SLOT_SOURCE = "${source}"
SLOT_TARGET = "${target}"
_BY_SPECIFICITY = sorted(
    range(N_TEMPLATES),
    key=lambda i: (-sum(w not in (SLOT_SOURCE, SLOT_TARGET) for w in TEMPLATES[i].split()), i),
)


def template_class(template_id: int) -> str:
    """'both', 'target' (target-only) or 'source' (source-only)."""
    text = TEMPLATES[_check_id(template_id)]
    has_s, has_t = SLOT_SOURCE in text, SLOT_TARGET in text
    if has_s and has_t:
        return "both"
    return "source" if has_s else "target"


def template_words() -> list[str]:
    """Every literal (non-slot) word used by the templates, in first-seen order."""
    seen: dict[str, None] = {}
    for text in TEMPLATES:
        for w in text.split():
            if w not in (SLOT_SOURCE, SLOT_TARGET):
                seen.setdefault(w, None)
    return list(seen)


def render_template(source: str | None, target: str | None, template_id: int) -> str:
    """Fill the slots of a template with (possibly multi-word) strings."""
    text = TEMPLATES[_check_id(template_id)]
    if SLOT_SOURCE in text and source is None:
        raise ValueError(f"template {template_id} needs a source word")
    if SLOT_TARGET in text and target is None:
        raise ValueError(f"template {template_id} needs a target word")
    return Template(text).substitute(source=source or "", target=target or "")


def template_slots(template_id: int) -> list[str | None]:
    """Token-level layout of a template: literal words, or 'source'/'target' for slots."""
    out: list[str | None] = []
    for w in TEMPLATES[_check_id(template_id)].split():
        if w == SLOT_SOURCE:
            out.append("source")
        elif w == SLOT_TARGET:
            out.append("target")
        else:
            out.append(w)
    return out


def match_text(text: str) -> tuple[str | None, str | None, int] | None:
    """String-level parse: (source, target, template_id).

    Slots may span several words, so "${target}" alone matches anything; the
    template with the most literal words wins, ties going to the lower id.
    """
    text = " ".join(text.split())
    for tid in _BY_SPECIFICITY:
        tpl = TEMPLATES[tid]
        pattern = re.escape(tpl)
        pattern = pattern.replace(re.escape(SLOT_SOURCE), r"(?P<source>.+?)")
        pattern = pattern.replace(re.escape(SLOT_TARGET), r"(?P<target>.+?)")
        m = re.fullmatch(pattern, text)
        if m:
            d = m.groupdict()
            return d.get("source"), d.get("target"), tid
    return None


def _check_id(template_id: int) -> int:
    if not 0 <= template_id < N_TEMPLATES:
        raise ValueError(f"template id {template_id} outside [0, {N_TEMPLATES})")
    return template_id
