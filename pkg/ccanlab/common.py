# ccanlab/common.py
from typing import Iterable, List, Optional, Sequence, Tuple


# ==================== RESERVED TOKENS ====================

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
MASK_ID = 3

PAD = "<pad>"
BOS = "<bos>"
EOS = "<eos>"
MASK = "<mask>"

SPECIAL_TOKENS = (PAD, BOS, EOS, MASK)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


# ==================== ERRORS ====================

class LabError(Exception):
    """Base error; `exit_code` is what the CLI exits with."""
    exit_code = EXIT_USAGE


class ConfigError(LabError):
    exit_code = EXIT_USAGE


class DataError(LabError):
    exit_code = EXIT_DATA


class NumericError(LabError):
    exit_code = EXIT_NUMERIC


class ShapeError(NumericError):
    """Raised with both offending shapes in the message."""

    def __init__(self, op: str, *shapes: Tuple[int, ...], detail: str = ""):
        self.op = op
        self.shapes = shapes
        shown = " and ".join(str(tuple(s)) for s in shapes)
        message = f"{op}: incompatible shapes {shown}"
        if detail:
            message = f"{message} ({detail})"
        super().__init__(message)


class GraphError(NumericError):
    pass


class NonFiniteError(NumericError):
    pass


class EmptySupportError(NumericError):
    def __init__(self, message: str = "empty attention support"):
        super().__init__(message)


# ==================== VALIDATION UTILITIES ====================

def validate_window(win: int) -> int:
    """Window width must be a positive odd integer; returns the half width."""
    if not isinstance(win, int) or isinstance(win, bool) or win < 1 or win % 2 == 0:
        raise ConfigError(f"win must be an odd positive integer, got {win!r}")
    return (win - 1) // 2


def validate_layers(layers: Iterable[int], num_layers: int) -> Tuple[int, ...]:
    """Check 1-based decoder layer indices and return them sorted and unique."""
    result = sorted(set(int(layer) for layer in layers))
    for layer in result:
        if not 1 <= layer <= num_layers:
            raise ConfigError(f"decoder layer {layer} outside [1, {num_layers}]")
    return tuple(result)


def parse_layer_spec(spec: str, num_layers: int) -> Tuple[int, ...]:
    """
    Parse a decoder layer placement such as "1", "1-3", "L", "L-2..L", "1..L", "none".

    `L` stands for the top decoder layer. Items are comma separated; ranges use
    either "a-b" or "a..b". "none" (or an empty string) is the empty placement.
    """
    text = spec.strip().replace(" ", "")
    if text.lower() in ("", "none", "∅", "[]"):
        return ()

    def bound(token: str) -> int:
        token = token.upper()
        if token.startswith("L"):
            offset = token[1:]
            if not offset:
                return num_layers
            if not offset.startswith("-") or not offset[1:].isdigit():
                raise ConfigError(f"bad layer bound {token!r} in {spec!r}")
            return num_layers - int(offset[1:])
        if not token.isdigit():
            raise ConfigError(f"bad layer bound {token!r} in {spec!r}")
        return int(token)

    layers: List[int] = []
    for item in text.strip("[]").split(","):
        if ".." in item:
            lo, hi = item.split("..", 1)
        elif "-" in item[1:] and not item.upper().startswith("L-"):
            lo, hi = item.split("-", 1)
        else:
            lo = hi = item
        start, stop = bound(lo), bound(hi)
        if start > stop:
            raise ConfigError(f"empty layer range {item!r} in {spec!r}")
        layers.extend(range(start, stop + 1))
    return validate_layers(layers, num_layers)


def format_layers(layers: Sequence[int]) -> str:
    """Inverse of parse_layer_spec for display: (1, 2, 3) -> "1-3", () -> "none"."""
    if not layers:
        return "none"
    parts: List[str] = []
    run_start = prev = layers[0]
    for layer in list(layers[1:]) + [None]:
        if layer is not None and layer == prev + 1:
            prev = layer
            continue
        parts.append(str(run_start) if run_start == prev else f"{run_start}-{prev}")
        if layer is not None:
            run_start = prev = layer
    return ",".join(parts)


def validate_tokens(ids: Sequence[int], vocab_size: int, max_len: Optional[int] = None) -> None:
    if len(ids) == 0:
        raise DataError("empty token sequence")
    if max_len is not None and len(ids) > max_len:
        raise DataError(f"sequence of length {len(ids)} exceeds max_len {max_len}")
    for token_id in ids:
        if not 0 <= token_id < vocab_size:
            raise DataError(f"token id {token_id} outside vocabulary of size {vocab_size}")
