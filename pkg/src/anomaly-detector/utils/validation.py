import re

from datamodels import COMBINATIONS, ConfigurationError

# ============================================================================
# Input validation
# ============================================================================


def parse_combos(value: str) -> list[int]:
    """'all' or a comma list of combo indices 1..7 -> sorted unique list"""
    value = value.strip().lower()
    if value == "all":
        return sorted(COMBINATIONS)

    combos = []
    for part in value.split(","):
        part = part.strip()
        if not part.isdigit() or int(part) not in COMBINATIONS:
            raise ConfigurationError(f"invalid combo '{part}'; expected 'all' or indices 1..7")
        combos.append(int(part))

    if not combos:
        raise ConfigurationError("no combos given")
    return sorted(set(combos))


def sanitize_sample_id(sample_id: str) -> str:
    """Allow only alphanumeric, underscore, hyphen, dot"""
    sanitized = re.sub(r"[^a-zA-Z0-9_.-]", "_", sample_id).strip("._")
    if not sanitized:
        raise ConfigurationError("sample id cannot be empty after sanitisation")
    return sanitized[:100]
