"""Desk-scale procedural generator of Raven-style matrix puzzles.

Each sample is a 3x3 grid of panels governed by 1..4 rules.  A rule is a
triplet (object family, attribute, relation); relations act along rows
(or columns, configurable) of an abstract attribute grid which is then
rasterized into grayscale panels.  The correct answer completes cell
(2, 2); seven distractors each perturb one rule-governed attribute.  A
rule-consistency oracle over the abstract grids verifies that exactly
one choice fits.

Attribute domains: type = polygon edge count 3..7 (lines: 5 stroke
patterns), size = 5 scale levels, color = 5 gray levels, number = 1..5
objects, position = 9-cell occupancy bitmask.  All values are encoded as
levels 1..5 internally except position masks.
"""

import functools
import logging
import struct
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConfigError, ContractError, FormatError, GenerationError

logger = logging.getLogger(__name__)

DATASET_MAGIC = b"PGMD"
DATASET_VERSION = 1

LEVELS = (1, 2, 3, 4, 5)
GRAY_LEVELS = (70, 115, 160, 205, 250)


class ObjectType(Enum):
    SHAPE = 0
    LINE = 1


class Attribute(Enum):
    SIZE = 0
    TYPE = 1
    POSITION = 2
    NUMBER = 3
    COLOR = 4


class Relation(Enum):
    PROGRESSION = 0
    AND = 1
    OR = 2
    XOR = 3
    CONSISTENT_UNION = 4


SET_RELATIONS = (Relation.AND, Relation.OR, Relation.XOR)
ORDINAL_ATTRIBUTES = (Attribute.SIZE, Attribute.TYPE, Attribute.NUMBER, Attribute.COLOR)

# Meta-target layout: bits 0-4 relations, bits 5-6 object types,
# bits 7-11 attributes.
_RELATION_BIT = {r: r.value for r in Relation}
_OBJECT_BIT = {o: 5 + o.value for o in ObjectType}
_ATTRIBUTE_BIT = {a: 7 + a.value for a in Attribute}
N_META_BITS = 12


@dataclass(frozen=True)
class RuleTriplet:
    object_type: ObjectType
    attribute: Attribute
    relation: Relation

    def __post_init__(self):
        if not rule_is_valid(self.object_type, self.attribute, self.relation):
            raise ContractError(
                f"invalid rule ({self.object_type.name}, {self.attribute.name}, {self.relation.name})"
            )

    def encode(self):
        """One-hot 12-bit encoding: relation, object type, attribute."""
        return (
            (1 << _RELATION_BIT[self.relation])
            | (1 << _OBJECT_BIT[self.object_type])
            | (1 << _ATTRIBUTE_BIT[self.attribute])
        )


def rule_is_valid(object_type, attribute, relation):
    """Set-logical relations pair only with position; progression only
    with ordinal attributes; consistent union pairs with anything."""
    if relation in SET_RELATIONS:
        return attribute is Attribute.POSITION
    if relation is Relation.PROGRESSION:
        return attribute in ORDINAL_ATTRIBUTES
    return True


def all_valid_triplets():
    out = []
    for obj in ObjectType:
        for attr in Attribute:
            for rel in Relation:
                if rule_is_valid(obj, attr, rel):
                    out.append(RuleTriplet(obj, attr, rel))
    return out


@dataclass(frozen=True)
class MetaTarget:
    """12-bit auxiliary label: the OR of all rule encodings in a sample."""

    bits: int

    @classmethod
    def from_rules(cls, rules):
        mask = 0
        for rule in rules:
            mask |= rule.encode()
        return cls(mask)

    def vector(self, dtype=np.float32):
        return np.array([(self.bits >> i) & 1 for i in range(N_META_BITS)], dtype=dtype)


def meta_vectors(bit_masks, dtype=np.float32):
    """(n,) integer bitmasks -> (n, 12) 0/1 matrix."""
    masks = np.asarray(bit_masks, dtype=np.int64)
    return ((masks[:, None] >> np.arange(N_META_BITS)) & 1).astype(dtype)


# -- rule sampling -----------------------------------------------------------


def sample_rules(rng, n_rules):
    """Draw mutually compatible rule triplets.

    Compatibility: distinct (object, attribute) pairs, and within one
    family at most one of {position, number} may be governed since both
    constrain the occupancy mask.
    """
    if not 1 <= n_rules <= 4:
        raise ContractError(f"n_rules must be in [1, 4], got {n_rules}")
    pool = all_valid_triplets()
    while True:
        picks = [pool[i] for i in rng.choice(len(pool), size=n_rules, replace=False)]
        pairs = {(r.object_type, r.attribute) for r in picks}
        if len(pairs) != n_rules:
            continue
        ok = True
        for obj in ObjectType:
            governed = {r.attribute for r in picks if r.object_type is obj}
            if Attribute.POSITION in governed and Attribute.NUMBER in governed:
                ok = False
        if ok:
            return picks


# -- abstract grids ----------------------------------------------------------

_CHANNELS = ("mask", "size", "type", "color")


def _popcount(x):
    return bin(x).count("1")


def _random_mask(rng, min_count=1, max_count=4):
    count = int(rng.integers(min_count, max_count + 1))
    bits = rng.choice(9, size=count, replace=False)
    mask = 0
    for b in bits:
        mask |= 1 << int(b)
    return mask


def _mask_with_popcount(rng, count):
    bits = rng.choice(9, size=count, replace=False)
    mask = 0
    for b in bits:
        mask |= 1 << int(b)
    return mask


def _default_grid(rng):
    """Constant grid for ungoverned channels; mid-to-large default size
    keeps small glyph types legible at desk resolution."""
    grid = {ch: np.zeros((3, 3), dtype=np.int32) for ch in _CHANNELS}
    grid["mask"][:] = _random_mask(rng)
    grid["size"][:] = int(rng.integers(3, 6))
    grid["type"][:] = int(rng.integers(1, 6))
    grid["color"][:] = int(rng.integers(1, 6))
    return grid


def _cell(line, k, orientation):
    return (line, k) if orientation == "row" else (k, line)


def _apply_rule(grid, rule, rng, orientation):
    attr = rule.attribute
    rel = rule.relation
    if rel is Relation.PROGRESSION:
        step = int(rng.choice([-2, -1, 1, 2]))
        lo = max(1, 1 - 2 * step)
        hi = min(5, 5 - 2 * step)
        channel = "mask" if attr is Attribute.NUMBER else attr.name.lower()
        for line in range(3):
            start = int(rng.integers(lo, hi + 1))
            for k in range(3):
                value = start + k * step
                r, c = _cell(line, k, orientation)
                if attr is Attribute.NUMBER:
                    grid["mask"][r, c] = _mask_with_popcount(rng, value)
                else:
                    grid[channel][r, c] = value
    elif rel in SET_RELATIONS:
        for line in range(3):
            while True:
                m1 = _random_mask(rng, 1, 3) if rel is not Relation.AND else _random_mask(rng, 2, 5)
                m2 = _random_mask(rng, 1, 3) if rel is not Relation.AND else _random_mask(rng, 2, 5)
                if rel is Relation.AND:
                    m3 = m1 & m2
                elif rel is Relation.OR:
                    m3 = m1 | m2
                else:
                    m3 = m1 ^ m2
                if m3 != 0:
                    break
            for k, m in enumerate((m1, m2, m3)):
                r, c = _cell(line, k, orientation)
                grid["mask"][r, c] = m
    else:  # consistent union: same value multiset in every line
        if attr is Attribute.POSITION:
            values = set()
            while len(values) < 3:
                values.add(_random_mask(rng, 1, 4))
            values = sorted(values)
        else:
            values = sorted(int(v) for v in rng.choice(LEVELS, size=3, replace=False))
        for line in range(3):
            order = rng.permutation(3)
            for k in range(3):
                r, c = _cell(line, k, orientation)
                value = values[int(order[k])]
                if attr in (Attribute.NUMBER,):
                    grid["mask"][r, c] = _mask_with_popcount(rng, value)
                elif attr is Attribute.POSITION:
                    grid["mask"][r, c] = value
                else:
                    grid[attr.name.lower()][r, c] = value


def _cell_state(grid, r, c):
    return (
        int(grid["mask"][r, c]),
        int(grid["size"][r, c]),
        int(grid["type"][r, c]),
        int(grid["color"][r, c]),
    )


def _attr_value(state, attr):
    mask, size, type_, color = state
    if attr is Attribute.SIZE:
        return size
    if attr is Attribute.TYPE:
        return type_
    if attr is Attribute.POSITION:
        return mask
    if attr is Attribute.NUMBER:
        return _popcount(mask)
    return color


def _rule_holds(grids, rule, orientation, override=None):
    """Does one rule hold on the abstract grids, with cell (2, 2)
    optionally replaced by an override state per family?"""

    def state_at(r, c):
        if override is not None and (r, c) == (2, 2):
            return override[rule.object_type]
        return _cell_state(grids[rule.object_type], r, c)

    values = [
        [_attr_value(state_at(*_cell(line, k, orientation)), rule.attribute) for k in range(3)]
        for line in range(3)
    ]
    rel = rule.relation
    if rel is Relation.PROGRESSION:
        step = values[0][1] - values[0][0]
        if step == 0:
            return False
        return all(v[k + 1] - v[k] == step for v in values for k in range(2))
    if rel in SET_RELATIONS:
        op = {Relation.AND: int.__and__, Relation.OR: int.__or__, Relation.XOR: int.__xor__}[rel]
        return all(v[2] == op(v[0], v[1]) for v in values)
    base = sorted(values[0])
    return sorted(values[1]) == base and sorted(values[2]) == base


def rules_satisfied(grids, rules, orientation="row", override=None):
    return all(_rule_holds(grids, rule, orientation, override) for rule in rules)


# -- distractors -------------------------------------------------------------


def _perturb_level(rng, value):
    options = [value + d for d in (-2, -1, 1, 2) if 1 <= value + d <= 5]
    return int(rng.choice(options))


def _perturb_state(rng, state, attr):
    mask, size, type_, color = state
    if attr is Attribute.SIZE:
        return (mask, _perturb_level(rng, size), type_, color)
    if attr is Attribute.TYPE:
        return (mask, size, _perturb_level(rng, type_), color)
    if attr is Attribute.COLOR:
        return (mask, size, type_, _perturb_level(rng, color))
    if attr is Attribute.NUMBER:
        new_count = _perturb_level(rng, _popcount(mask))
        return (_mask_with_popcount(rng, new_count), size, type_, color)
    while True:  # position: flip one occupancy bit, keep the panel non-empty
        flipped = mask ^ (1 << int(rng.integers(0, 9)))
        if flipped != 0:
            return (flipped, size, type_, color)


def _state_key(states):
    return tuple(sorted((obj.value, s) for obj, s in states.items()))


# -- rasterization -----------------------------------------------------------


@functools.lru_cache(maxsize=4096)
def _glyph(object_type, type_level, size_level, color_level, cell):
    canvas = np.zeros((cell, cell), dtype=np.uint8)
    value = GRAY_LEVELS[color_level - 1]
    if object_type is ObjectType.SHAPE:
        _fill_polygon(canvas, type_level + 2, size_level, value)
    else:
        _stroke_lines(canvas, type_level, size_level, value)
    canvas.setflags(write=False)
    return canvas


def _fill_polygon(canvas, n_edges, size_level, value):
    cell = canvas.shape[0]
    center = (cell - 1) / 2.0
    radius = (cell / 2.0 - 1.0) * (0.30 + 0.14 * size_level)
    angles = -np.pi / 2 + 2 * np.pi * np.arange(n_edges) / n_edges
    vx = center + radius * np.cos(angles)
    vy = center + radius * np.sin(angles)
    ys, xs = np.mgrid[0:cell, 0:cell]
    px = xs + 0.0
    py = ys + 0.0
    inside = np.zeros((cell, cell), dtype=bool)
    for i in range(n_edges):  # even-odd crossing test at pixel centers
        x1, y1 = vx[i], vy[i]
        x2, y2 = vx[(i + 1) % n_edges], vy[(i + 1) % n_edges]
        crosses = (y1 > py) != (y2 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_at = (x2 - x1) * (py - y1) / (y2 - y1) + x1
        inside ^= crosses & (px < x_at)
    canvas[inside] = value


def _stroke_lines(canvas, type_level, size_level, value):
    cell = canvas.shape[0]
    mid = (cell - 1) // 2
    half = max(1, int(round((cell - 1) / 2.0 * (0.25 + 0.13 * size_level))))
    lo, hi = mid - half, mid + half
    segments = {
        1: [((lo, mid), (hi, mid))],                    # horizontal
        2: [((mid, lo), (mid, hi))],                    # vertical
        3: [((lo, lo), (hi, hi))],                      # diagonal down
        4: [((lo, hi), (hi, lo))],                      # diagonal up
        5: [((lo, mid), (hi, mid)), ((mid, lo), (mid, hi))],  # cross
    }[type_level]
    for (x0, y0), (x1, y1) in segments:
        _draw_line(canvas, x0, y0, x1, y1, value)


def _draw_line(canvas, x0, y0, x1, y1, value):
    dx = abs(x1 - x0)
    dy = -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    size = canvas.shape[0]
    while True:
        if 0 <= y0 < size and 0 <= x0 < size:
            canvas[y0, x0] = max(canvas[y0, x0], value)
        if x0 == x1 and y0 == y1:
            break
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def render_panel(states, panel_size):
    """Rasterize one panel from per-family abstract states."""
    canvas = np.zeros((panel_size, panel_size), dtype=np.uint8)
    cell = panel_size // 3
    margin = (panel_size - 3 * cell) // 2
    for obj in sorted(states, key=lambda o: o.value):
        mask, size, type_, color = states[obj]
        glyph = _glyph(obj, type_, size, color, cell)
        for bit in range(9):
            if mask >> bit & 1:
                r, c = divmod(bit, 3)
                y0, x0 = margin + r * cell, margin + c * cell
                region = canvas[y0:y0 + cell, x0:x0 + cell]
                np.maximum(region, glyph, out=region)
    return canvas


# -- sample assembly ---------------------------------------------------------


@dataclass
class PgmSample:
    """One puzzle: 8 context panels, 8 choice panels, answer index, rules.

    The abstract grids and per-choice abstract states are generation-time
    artifacts used by the oracle; they are not serialized.
    """

    context: np.ndarray
    choices: np.ndarray
    target: int
    meta: MetaTarget
    rules: tuple
    grids: dict = None
    choice_states: list = None
    orientation: str = "row"

    @property
    def panels(self):
        """(16, H, W) stacked contexts then choices."""
        return np.concatenate([self.context, self.choices], axis=0)


MAX_DISTRACTOR_RETRIES = 50


def realize_matrix(rules, rng, panel_size=32, orientation="row"):
    """Build abstract grids satisfying every rule, render panels, and
    attach 7 single-attribute distractors; the answer index is uniform."""
    if orientation not in ("row", "column"):
        raise ConfigError(f"orientation must be 'row' or 'column', got {orientation}")
    active = []
    for rule in rules:
        if rule.object_type not in active:
            active.append(rule.object_type)
    grids = {obj: _default_grid(rng) for obj in active}
    for rule in rules:
        _apply_rule(grids[rule.object_type], rule, rng, orientation)
    if not rules_satisfied(grids, rules, orientation):
        raise GenerationError("constructed grids violate their own rules")

    answer = {obj: _cell_state(grids[obj], 2, 2) for obj in active}
    answer_key = _state_key(answer)
    used = {answer_key}
    distractors = []
    for i in range(7):
        rule = rules[i % len(rules)]
        # prefer distinct distractor states; a single ordinal rule only has
        # four wrong levels, so reuse is allowed once the pool is exhausted
        found = None
        for attempt in range(MAX_DISTRACTOR_RETRIES):
            candidate = dict(answer)
            candidate[rule.object_type] = _perturb_state(
                rng, answer[rule.object_type], rule.attribute
            )
            key = _state_key(candidate)
            if key == answer_key or key in used:
                continue
            if rules_satisfied(grids, rules, orientation, override=candidate):
                continue
            used.add(key)
            found = candidate
            break
        if found is None:
            for attempt in range(MAX_DISTRACTOR_RETRIES):
                candidate = dict(answer)
                candidate[rule.object_type] = _perturb_state(
                    rng, answer[rule.object_type], rule.attribute
                )
                if _state_key(candidate) == answer_key:
                    continue
                if rules_satisfied(grids, rules, orientation, override=candidate):
                    continue
                found = candidate
                break
        if found is None:
            raise GenerationError(
                f"no failing distractor after {2 * MAX_DISTRACTOR_RETRIES} tries"
            )
        distractors.append(found)

    target = int(rng.integers(0, 8))
    choice_states = distractors[:target] + [answer] + distractors[target:]
    context_cells = [(r, c) for r in range(3) for c in range(3)][:-1]
    context = np.stack([
        render_panel({obj: _cell_state(grids[obj], r, c) for obj in active}, panel_size)
        for r, c in context_cells
    ])
    choices = np.stack([render_panel(s, panel_size) for s in choice_states])
    return PgmSample(
        context=context,
        choices=choices,
        target=target,
        meta=MetaTarget.from_rules(rules),
        rules=tuple(rules),
        grids=grids,
        choice_states=choice_states,
        orientation=orientation,
    )


def oracle_check(sample, choice_index):
    """True iff substituting choice ``choice_index`` into cell (2, 2)
    satisfies every rule of the sample (abstract grids required)."""
    if sample.grids is None or sample.choice_states is None:
        raise ContractError("oracle needs the sample's abstract grids (generation-time only)")
    override = sample.choice_states[choice_index]
    return rules_satisfied(sample.grids, sample.rules, sample.orientation, override=override)


# -- dataset container and binary format --------------------------------------


class PgmDataset:
    """In-memory puzzle collection with a flat binary file format."""

    def __init__(self, panels, targets, metas, rules, height, width, split="train"):
        self.panels = panels          # (n, 16, H, W) uint8
        self.targets = targets        # (n,) uint8
        self.metas = metas            # (n,) uint16 bitmasks
        self.rules = rules            # list of RuleTriplet tuples
        self.height = height
        self.width = width
        self.split = split

    def __len__(self):
        return len(self.targets)

    def meta_matrix(self, dtype=np.float32):
        return meta_vectors(self.metas, dtype=dtype)

    def rule_counts(self):
        return np.array([len(r) for r in self.rules], dtype=np.int64)

    def subset(self, indices):
        indices = np.asarray(indices)
        return PgmDataset(
            panels=self.panels[indices],
            targets=self.targets[indices],
            metas=self.metas[indices],
            rules=[self.rules[int(i)] for i in indices],
            height=self.height,
            width=self.width,
            split=self.split,
        )

    def to_bytes(self):
        split_bytes = self.split.encode()
        parts = [
            DATASET_MAGIC,
            struct.pack("<BIHHB", DATASET_VERSION, len(self), self.height, self.width,
                        len(split_bytes)),
            split_bytes,
        ]
        for i in range(len(self)):
            meta = int(self.metas[i])
            if meta & ~0x0FFF:
                raise ContractError(f"meta bitmask {meta:#06x} uses more than 12 bits")
            rules = self.rules[i]
            parts.append(struct.pack("<BHB", int(self.targets[i]), meta, len(rules)))
            for rule in rules:
                parts.append(struct.pack("<BBB", rule.object_type.value,
                                         rule.attribute.value, rule.relation.value))
            parts.append(self.panels[i].tobytes())
        return b"".join(parts)

    def save(self, path):
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def from_bytes(cls, blob):
        offset = 0

        def need(n, what):
            nonlocal offset
            if offset + n > len(blob):
                raise FormatError(f"dataset truncated at offset {offset} while reading {what}")
            piece = blob[offset:offset + n]
            offset += n
            return piece

        magic = need(4, "magic")
        if magic != DATASET_MAGIC:
            raise FormatError(f"bad dataset magic {magic!r}, expected {DATASET_MAGIC!r}")
        version, count, height, width, split_len = struct.unpack("<BIHHB", need(10, "header"))
        if version != DATASET_VERSION:
            raise FormatError(f"unsupported dataset version {version}")
        split = need(split_len, "split tag").decode()
        panel_bytes = 16 * height * width
        panels = np.empty((count, 16, height, width), dtype=np.uint8)
        targets = np.empty(count, dtype=np.uint8)
        metas = np.empty(count, dtype=np.uint16)
        rules = []
        for i in range(count):
            target, meta, n_rules = struct.unpack("<BHB", need(4, f"record {i} header"))
            if meta & ~0x0FFF:
                raise FormatError(f"record {i} meta bitmask uses reserved bits")
            sample_rules_ = []
            for _ in range(n_rules):
                obj, attr, rel = struct.unpack("<BBB", need(3, f"record {i} rule"))
                sample_rules_.append(RuleTriplet(ObjectType(obj), Attribute(attr), Relation(rel)))
            raw = need(panel_bytes, f"record {i} panels")
            panels[i] = np.frombuffer(raw, dtype=np.uint8).reshape(16, height, width)
            targets[i] = target
            metas[i] = meta
            rules.append(tuple(sample_rules_))
        if offset != len(blob):
            raise FormatError(f"dataset has {len(blob) - offset} trailing bytes at offset {offset}")
        return cls(panels, targets, metas, rules, height, width, split)

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


MAX_SAMPLE_ATTEMPTS = 20


def generate_sample(seed, index, panel_size=32, min_rules=1, max_rules=4, orientation="row"):
    """One fully deterministic sample: the stream depends only on
    (seed, index, attempt), so generation parallelizes without drift."""
    for attempt in range(MAX_SAMPLE_ATTEMPTS):
        rng = np.random.default_rng([seed, index, attempt])
        n_rules = int(rng.integers(min_rules, max_rules + 1))
        rules = sample_rules(rng, n_rules)
        try:
            return realize_matrix(rules, rng, panel_size, orientation)
        except GenerationError as exc:
            logger.warning("sample (seed=%s, index=%s) attempt %s failed: %s",
                           seed, index, attempt, exc)
    raise GenerationError(f"sample (seed={seed}, index={index}) failed {MAX_SAMPLE_ATTEMPTS} times")


def generate_dataset(n, seed, panel_size=32, min_rules=1, max_rules=4,
                     split="train", orientation="row", keep_abstract=False):
    """Generate ``n`` samples and pack them into a PgmDataset."""
    if n < 1:
        raise ContractError("dataset size must be at least 1")
    if not 1 <= min_rules <= max_rules <= 4:
        raise ConfigError(f"rule counts must satisfy 1 <= min <= max <= 4, got {min_rules}..{max_rules}")
    panels = np.empty((n, 16, panel_size, panel_size), dtype=np.uint8)
    targets = np.empty(n, dtype=np.uint8)
    metas = np.empty(n, dtype=np.uint16)
    rules = []
    abstract = [] if keep_abstract else None
    for i in range(n):
        sample = generate_sample(seed, i, panel_size, min_rules, max_rules, orientation)
        panels[i] = sample.panels
        targets[i] = sample.target
        metas[i] = sample.meta.bits
        rules.append(sample.rules)
        if keep_abstract:
            abstract.append(sample)
    ds = PgmDataset(panels, targets, metas, rules, panel_size, panel_size, split)
    ds.abstract_samples = abstract
    return ds
