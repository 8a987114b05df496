"""Export the abstract MDP as a PRISM-language model.

The emitted module uses one integer state variable, one labeled command per
(state, action) pair, self-loops on the three absorbing states, `target` /
`collision` / `free` labels, and a transition-reward block named `energy`
carrying the per-action communication cost.  A small parser reads the file
back so round-tripping can be checked without PRISM itself.
"""
from __future__ import annotations

import re

from .errors import FileFormatError
from .mdp import MOMDP

__all__ = ["export_prism", "parse_prism", "prism_text"]


def _fmt(x: float) -> str:
    """repr keeps full double precision; PRISM accepts scientific notation."""
    return repr(float(x))


def prism_text(mdp: MOMDP) -> str:
    """Render the MDP as PRISM source (stable across runs for equal input)."""
    n = mdp.n_states
    lines = [
        "// event-triggered navigation abstraction",
        f"// states: {n}, actions per state: {mdp.n_actions}, method: {mdp.method}",
        "mdp",
        "",
        "module navigation",
        f"  s : [0..{n - 1}] init {mdp.initial};",
        "",
    ]
    for sid, state in enumerate(mdp.states):
        if state.terminal:
            continue
        for ai in range(mdp.n_actions):
            row = mdp.transitions[sid][ai]
            updates = " + ".join(
                f"{_fmt(p)}:(s'={dest})" for dest, p in sorted(row.items())
            )
            lines.append(f"  [a{ai}] s={sid} -> {updates};")
    lines.append("  // absorbing terminals")
    for sid, state in enumerate(mdp.states):
        if state.terminal:
            lines.append(f"  [a0] s={sid} -> 1.0:(s'={sid});")
    lines += [
        "endmodule",
        "",
        f'label "target" = s={mdp.tar_id};',
        f'label "collision" = s={mdp.coll_id};',
        f'label "free" = s={mdp.free_id};',
        "",
        'rewards "energy"',
    ]
    for sid, state in enumerate(mdp.states):
        if state.terminal:
            continue
        for ai in range(mdp.n_actions):
            cost = mdp.costs[sid][ai]
            if cost != 0.0:
                lines.append(f"  [a{ai}] s={sid} : {_fmt(cost)};")
    lines += ["endrewards", ""]
    return "\n".join(lines)


def export_prism(mdp: MOMDP, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(prism_text(mdp))


_CMD = re.compile(r"^\[a(\d+)\]\s*s=(\d+)\s*->\s*(.+);$")
_UPDATE = re.compile(r"^([^:]+):\(s'=(\d+)\)$")
_REWARD = re.compile(r"^\[a(\d+)\]\s*s=(\d+)\s*:\s*(.+);$")
_LABEL = re.compile(r'^label\s+"(\w+)"\s*=\s*s=(\d+);$')
_INIT = re.compile(r"^s\s*:\s*\[0\.\.(\d+)\]\s*init\s+(\d+);$")


class PrismModel:
    """Bare transition structure parsed back from a PRISM file."""

    def __init__(self):
        self.n_states = 0
        self.initial = 0
        self.transitions: dict[tuple[int, int], dict[int, float]] = {}
        self.rewards: dict[tuple[int, int], float] = {}
        self.labels: dict[str, int] = {}


def parse_prism(path) -> PrismModel:
    """Read back a file written by :func:`export_prism`.

    This is a deliberately narrow parser for round-trip checking, not a
    general PRISM front end.
    """
    model = PrismModel()
    in_rewards = False
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            line = raw.split("//", 1)[0].strip()
            if not line:
                continue
            if line == 'rewards "energy"':
                in_rewards = True
                continue
            if line == "endrewards":
                in_rewards = False
                continue
            if line in ("mdp", "endmodule") or line.startswith("module"):
                continue
            m = _INIT.match(line)
            if m:
                model.n_states = int(m.group(1)) + 1
                model.initial = int(m.group(2))
                continue
            m = _LABEL.match(line)
            if m:
                model.labels[m.group(1)] = int(m.group(2))
                continue
            if in_rewards:
                m = _REWARD.match(line)
                if not m:
                    raise FileFormatError(f"unparseable reward line: {line!r}")
                model.rewards[(int(m.group(2)), int(m.group(1)))] = float(m.group(3))
                continue
            m = _CMD.match(line)
            if not m:
                raise FileFormatError(f"unparseable command line: {line!r}")
            ai, sid = int(m.group(1)), int(m.group(2))
            row: dict[int, float] = {}
            for part in m.group(3).split(" + "):
                u = _UPDATE.match(part.strip())
                if not u:
                    raise FileFormatError(f"unparseable update: {part!r}")
                row[int(u.group(2))] = float(u.group(1))
            model.transitions[(sid, ai)] = row
    if model.n_states == 0:
        raise FileFormatError("no state variable declaration found")
    return model
