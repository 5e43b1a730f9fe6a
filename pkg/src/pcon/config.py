"""Key-value experiment configs: a small TOML-style reader and writer.

Files hold ``key = value`` lines, optionally grouped under ``[section]``
headers (sections are cosmetic; keys are globally unique).  Values are
booleans, ints, floats, bare or quoted strings, or ``[a, b, ...]`` lists.
Every key can be overridden on the command line with ``--set key=value``.
"""

from __future__ import annotations


class ConfigError(ValueError):
    """Raised for unparseable config text or unknown/ill-typed keys."""


def parse_value(raw: str):
    raw = raw.strip()
    if raw.startswith("[") and raw.endswith("]"):
        inner = raw[1:-1].strip()
        return [parse_value(tok) for tok in inner.split(",")] if inner else []
    if (raw.startswith('"') and raw.endswith('"')) or (
        raw.startswith("'") and raw.endswith("'")
    ):
        return raw[1:-1]
    low = raw.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        pass
    return raw


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(format_value(v) for v in value) + "]"
    if isinstance(value, str):
        return value if value and " " not in value else f'"{value}"'
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config_text(text: str) -> dict:
    """Flatten config text to a {key: typed value} dict."""
    out: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            continue  # section headers only group keys visually
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = parse_value(raw)
    return out


def load_config(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_config_text(fh.read())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e


def format_config(values: dict, sections: dict[str, list[str]] | None = None) -> str:
    """Render a flat dict back to config text, optionally grouped."""
    lines = []
    if sections:
        seen = set()
        for title, keys in sections.items():
            present = [k for k in keys if k in values]
            if not present:
                continue
            lines.append(f"[{title}]")
            for k in present:
                lines.append(f"{k} = {format_value(values[k])}")
                seen.add(k)
            lines.append("")
        rest = [k for k in values if k not in seen]
        if rest:
            lines.append("[other]")
            lines.extend(f"{k} = {format_value(values[k])}" for k in rest)
    else:
        lines.extend(f"{k} = {format_value(values[k])}" for k in values)
    return "\n".join(lines).strip() + "\n"


def apply_overrides(values: dict, assignments) -> dict:
    """Apply ``key=value`` strings, accepting dotted section prefixes."""
    out = dict(values)
    for item in assignments or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        key = key.strip().split(".")[-1]
        if not key:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key] = parse_value(raw)
    return out
