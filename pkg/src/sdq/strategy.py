"""Mixed-precision strategies and their text file format.

A strategy file is ASCII, LF line endings, one directive per line::

    sdq-strategy 1
    model mlp:2-32-32-32-4
    candidates 2,3,4,5,6,7,8
    activation_bits 4
    layers 4
    layer fc0 8 64 pinned
    layer fc1 3 1024
    layer fc2 2 1024 rows=2,2,3,2
    layer fc3 8 128 pinned

``layer`` records are ``name bits params`` followed by optional ``pinned``
and ``rows=`` (per-output-row bitwidths, kernel granularity only), in model
order.  ``bits`` is the largest row bitwidth when ``rows=`` is present.
"""
from __future__ import annotations

from dataclasses import dataclass

from .gradcore import ContractError

MAGIC = "sdq-strategy"
VERSION = 1


@dataclass(frozen=True)
class LayerAssignment:
    name: str
    bits: int
    params: int
    pinned: bool = False
    row_bits: tuple | None = None

    @property
    def mean_bits(self) -> float:
        if self.row_bits:
            return sum(self.row_bits) / len(self.row_bits)
        return float(self.bits)


@dataclass(frozen=True)
class MpqStrategy:
    layers: tuple
    activation_bits: int
    model_id: str = ""
    candidates: tuple = ()

    @property
    def avg_weight_bits(self) -> float:
        total = sum(l.params for l in self.layers)
        return sum(l.params * l.mean_bits for l in self.layers) / total

    @property
    def bits(self) -> dict:
        return {l.name: l.bits for l in self.layers}

    def by_name(self) -> dict:
        return {l.name: l for l in self.layers}

    def dumps(self) -> str:
        lines = [
            f"{MAGIC} {VERSION}",
            f"model {self.model_id}",
            "candidates " + ",".join(str(b) for b in self.candidates),
            f"activation_bits {self.activation_bits}",
            f"layers {len(self.layers)}",
        ]
        for l in self.layers:
            rec = f"layer {l.name} {l.bits} {l.params}"
            if l.pinned:
                rec += " pinned"
            if l.row_bits:
                rec += " rows=" + ",".join(str(b) for b in l.row_bits)
            lines.append(rec)
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "MpqStrategy":
        lines = [ln for ln in text.split("\n") if ln.strip()]
        if not lines or lines[0].split() != [MAGIC, str(VERSION)]:
            raise ContractError("not an sdq strategy file (bad header)")
        head = {}
        layers = []
        for ln in lines[1:]:
            key, _, rest = ln.partition(" ")
            if key == "layer":
                parts = rest.split()
                if len(parts) < 3:
                    raise ContractError(f"malformed layer record {ln!r}")
                name, bits, params, *flags = parts
                pinned = False
                rows = None
                for flag in flags:
                    if flag == "pinned":
                        pinned = True
                    elif flag.startswith("rows="):
                        rows = tuple(int(b) for b in flag[5:].split(","))
                    else:
                        raise ContractError(f"unknown layer flag {flag!r}")
                layers.append(LayerAssignment(name, int(bits), int(params), pinned, rows))
            elif key in ("model", "candidates", "activation_bits", "layers"):
                head[key] = rest.strip()
            else:
                raise ContractError(f"unknown strategy directive {key!r}")
        try:
            declared = int(head["layers"])
            act = int(head["activation_bits"])
        except (KeyError, ValueError):
            raise ContractError("strategy header missing activation_bits/layers") from None
        if declared != len(layers):
            raise ContractError(f"strategy declares {declared} layers, found {len(layers)}")
        cands = tuple(int(b) for b in head.get("candidates", "").split(",") if b)
        return cls(tuple(layers), act, head.get("model", ""), cands)

    def save(self, path):
        with open(path, "w", encoding="ascii", newline="\n") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path) -> "MpqStrategy":
        with open(path, encoding="ascii") as fh:
            return cls.loads(fh.read())


def uniform_strategy(metas, bits: int, activation_bits: int, pinned=(), pinned_bits: int = 8,
                     model_id: str = "") -> MpqStrategy:
    """Every layer at ``bits`` except the named pinned layers."""
    pinned = set(pinned)
    layers = tuple(
        LayerAssignment(m.name, pinned_bits if m.name in pinned else bits, m.params,
                        m.name in pinned)
        for m in metas
    )
    return MpqStrategy(layers, activation_bits, model_id)
