"""
Change event simulation for pychangen.

This module samples the semantic transition from one time step to the next:
object creation, object removal, attribute editing through a transition
matrix, and contour removal for contour-conditioned (self-supervised) data.

Every simulator is a deterministic function of its inputs and the EventSpec's
``rng_seed``. Instances are visited in ascending id order and each one draws
its own Bernoulli selection, so a test can replay the exact draws with
``numpy.random.default_rng(seed)``.
"""

import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np

from .constants import (
    DEFAULT_DILATION_RADIUS,
    DEFAULT_MAX_PLACEMENT_ATTEMPTS,
    DEFAULT_SELECTION_PROB,
    ROW_SUM_TOLERANCE,
)
from .errors import DimensionError, ParameterError
from .scene import (
    ChangeMask,
    ContourMap,
    InstanceMap,
    SemanticMask,
    change_mask_of,
    dilate,
    extract_contours,
    semantic_from_instances,
    union_of_supports,
)
from .seeding import numpy_rng

logger = logging.getLogger("ChangenEvents")


class EventKind(Enum):
    """Supported change events."""
    CREATE = "create"
    REMOVE = "remove"
    EDIT = "edit"
    CONTOUR_REMOVE = "contour_remove"


@dataclass(frozen=True, eq=False)
class TransitionMatrix:
    """
    Row-stochastic K x K matrix driving attribute edits.

    Row ``i`` holds the probabilities of an instance of class ``i`` turning
    into each class; the diagonal is the per-instance "no change" probability.
    """
    probs: np.ndarray
    class_names: Optional[List[str]] = None

    def __post_init__(self):
        probs = np.array(self.probs, dtype=np.float64, copy=True)
        if probs.ndim != 2 or probs.shape[0] != probs.shape[1]:
            raise DimensionError(f"transition matrix must be square, got {probs.shape}", "events")
        if probs.shape[0] < 2:
            raise ParameterError("transition matrix needs at least 2 classes", "events")
        if (probs < 0).any():
            raise ParameterError("transition probabilities must be >= 0", "events")
        sums = probs.sum(axis=1)
        bad = np.flatnonzero(np.abs(sums - 1.0) > ROW_SUM_TOLERANCE)
        if bad.size:
            raise ParameterError(
                f"rows {bad.tolist()} do not sum to 1 (sums {sums[bad].tolist()})", "events"
            )
        if self.class_names is not None and len(self.class_names) != probs.shape[0]:
            raise DimensionError("class_names length must equal K", "events")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @property
    def num_classes(self) -> int:
        return self.probs.shape[0]

    @classmethod
    def uniform(cls, num_classes: int, class_names: Optional[List[str]] = None) -> "TransitionMatrix":
        """Uniform over all classes, self-transition included."""
        return cls(np.full((num_classes, num_classes), 1.0 / num_classes), class_names)

    @classmethod
    def identity(cls, num_classes: int) -> "TransitionMatrix":
        return cls(np.eye(num_classes))

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "TransitionMatrix":
        """
        Load a K x K grid from CSV.

        A first row whose cells are not all numeric is taken as class names.
        """
        with open(path, newline="") as f:
            rows = [r for r in csv.reader(f) if r and any(c.strip() for c in r)]
        names = None
        try:
            [float(c) for c in rows[0]]
        except ValueError:
            names = [c.strip() for c in rows[0]]
            rows = rows[1:]
        return cls(np.array([[float(c) for c in r] for r in rows]), names)

    def to_dict(self) -> dict:
        return {"probs": self.probs.tolist(), "class_names": self.class_names}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TransitionMatrix":
        if "csv" in data:
            return cls.from_csv(data["csv"])
        return cls(np.array(data["probs"], dtype=np.float64), data.get("class_names"))

    def sample(self, current_class: int, rng: np.random.Generator) -> int:
        """Draw the next class for one instance of `current_class`."""
        return int(rng.choice(self.num_classes, p=self.probs[current_class]))


@dataclass(frozen=True)
class EventSpec:
    """
    Parameters of one change event.

    Use the ``create``/``remove``/``edit``/``contour_remove`` constructors;
    they fill the kind-specific defaults.
    """
    kind: EventKind
    selection_prob: float = DEFAULT_SELECTION_PROB
    rng_seed: int = 0
    max_placement_attempts: int = DEFAULT_MAX_PLACEMENT_ATTEMPTS
    transition: Optional[TransitionMatrix] = None
    dilation_radius: Optional[int] = None

    def __post_init__(self):
        if isinstance(self.kind, str):
            object.__setattr__(self, "kind", EventKind(self.kind))
        if not 0.0 <= self.selection_prob <= 1.0:
            raise ParameterError(
                f"selection_prob must lie in [0, 1], got {self.selection_prob}", "events"
            )
        if self.max_placement_attempts < 1:
            raise ParameterError("max_placement_attempts must be positive", "events")
        if self.kind == EventKind.EDIT and self.transition is None:
            raise ParameterError("edit events require a transition matrix", "events")
        if self.kind == EventKind.CONTOUR_REMOVE:
            if self.dilation_radius is None:
                raise ParameterError("contour_remove events require dilation_radius", "events")
            if self.dilation_radius < 0:
                raise ParameterError("dilation_radius must be >= 0", "events")

    @classmethod
    def create(cls, selection_prob: float = DEFAULT_SELECTION_PROB, rng_seed: int = 0,
               max_placement_attempts: int = DEFAULT_MAX_PLACEMENT_ATTEMPTS) -> "EventSpec":
        return cls(EventKind.CREATE, selection_prob, rng_seed, max_placement_attempts)

    @classmethod
    def remove(cls, selection_prob: float = DEFAULT_SELECTION_PROB, rng_seed: int = 0) -> "EventSpec":
        return cls(EventKind.REMOVE, selection_prob, rng_seed)

    @classmethod
    def edit(cls, transition: Optional[TransitionMatrix] = None, selection_prob: float = 1.0,
             rng_seed: int = 0, num_classes: Optional[int] = None) -> "EventSpec":
        """Edit event; without a matrix, transitions are uniform over `num_classes`."""
        if transition is None:
            if num_classes is None:
                raise ParameterError("edit needs a transition matrix or num_classes", "events")
            transition = TransitionMatrix.uniform(num_classes)
        return cls(EventKind.EDIT, selection_prob, rng_seed, transition=transition)

    @classmethod
    def contour_remove(cls, selection_prob: float = DEFAULT_SELECTION_PROB, rng_seed: int = 0,
                       dilation_radius: int = DEFAULT_DILATION_RADIUS) -> "EventSpec":
        return cls(EventKind.CONTOUR_REMOVE, selection_prob, rng_seed,
                   dilation_radius=dilation_radius)

    def with_seed(self, rng_seed: int) -> "EventSpec":
        return dataclasses.replace(self, rng_seed=int(rng_seed))

    def to_dict(self) -> dict:
        out = {
            "kind": self.kind.value,
            "selection_prob": self.selection_prob,
            "rng_seed": self.rng_seed,
        }
        if self.kind == EventKind.CREATE:
            out["max_placement_attempts"] = self.max_placement_attempts
        if self.transition is not None:
            out["transition"] = self.transition.to_dict()
        if self.dilation_radius is not None:
            out["dilation_radius"] = self.dilation_radius
        return out

    @classmethod
    def from_dict(cls, data: Dict[str, Any], num_classes: Optional[int] = None) -> "EventSpec":
        """
        Build a spec from a JSON record.

        Args:
            data: Record with at least ``kind``
            num_classes: Used for the uniform default of edit events
        """
        kind = EventKind(data["kind"])
        prob = float(data.get("selection_prob", DEFAULT_SELECTION_PROB))
        seed = int(data.get("rng_seed", 0))
        if kind == EventKind.CREATE:
            return cls.create(prob, seed, int(data.get("max_placement_attempts",
                                                       DEFAULT_MAX_PLACEMENT_ATTEMPTS)))
        if kind == EventKind.REMOVE:
            return cls.remove(prob, seed)
        if kind == EventKind.EDIT:
            transition = data.get("transition")
            matrix = TransitionMatrix.from_dict(transition) if transition else None
            return cls.edit(matrix, float(data.get("selection_prob", 1.0)), seed, num_classes)
        return cls.contour_remove(prob, seed, int(data.get("dilation_radius",
                                                          DEFAULT_DILATION_RADIUS)))


@dataclass(frozen=True)
class EventLogEntry:
    """What happened to one instance during an event."""
    instance_id: int
    action: str  # created, skipped, removed, edited, edited_to_background or kept
    old_class: int
    new_class: int
    source_id: Optional[int] = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True, eq=False)
class EventOutcome:
    """One sample of the semantic transition."""
    kind: EventKind
    next_mask: SemanticMask
    change: ChangeMask
    next_instances: InstanceMap
    log: List[EventLogEntry] = field(default_factory=list)
    next_contour: Optional[ContourMap] = None
    dilated_change: Optional[ChangeMask] = None

    def count(self, action: str) -> int:
        return sum(1 for entry in self.log if entry.action == action)


def _check_pair(mask: SemanticMask, instances: InstanceMap):
    if mask.shape != instances.shape:
        raise DimensionError(
            f"mask {mask.shape} and instance map {instances.shape} differ in size", "events"
        )


def _select(instances: InstanceMap, prob: float, rng: np.random.Generator) -> List[int]:
    """Independent Bernoulli(prob) draw per instance, ascending id order."""
    ids = instances.ids
    draws = rng.random(len(ids))
    return [i for i, d in zip(ids, draws) if d < prob]


def simulate_create(mask: SemanticMask, instances: InstanceMap, spec: EventSpec) -> EventOutcome:
    """
    Object creation: paste copies of selected instances onto background.

    Each selected instance's shape is tried at up to ``max_placement_attempts``
    uniformly drawn bounding-box anchors; the first anchor whose destination
    cells are all background (and free of instances) wins. Instances that
    never fit are skipped and logged.

    Args:
        mask: Semantic mask at time t
        instances: Instances of `mask`
        spec: Event spec with kind=create

    Returns:
        EventOutcome whose new instances get fresh ids
    """
    if spec.kind != EventKind.CREATE:
        raise ParameterError(f"expected a create spec, got {spec.kind.value}", "events")
    _check_pair(mask, instances)
    rng = numpy_rng(spec.rng_seed)
    selected = _select(instances, spec.selection_prob, rng)

    height, width = mask.shape
    data = mask.data.copy()
    inst = instances.data.copy()
    classes = dict(instances.classes)
    next_id = instances.next_id()
    log: List[EventLogEntry] = []

    for src in selected:
        cls = instances.classes[src]
        support = instances.data == src
        ys, xs = np.nonzero(support)
        shape = support[ys.min():ys.max() + 1, xs.min():xs.max() + 1]
        bh, bw = shape.shape
        placed = False
        if cls != mask.background_class and bh <= height and bw <= width:
            for _ in range(spec.max_placement_attempts):
                ay = int(rng.integers(0, height - bh + 1))
                ax = int(rng.integers(0, width - bw + 1))
                dest = data[ay:ay + bh, ax:ax + bw]
                dest_inst = inst[ay:ay + bh, ax:ax + bw]
                if (dest[shape] == mask.background_class).all() and (dest_inst[shape] == 0).all():
                    dest[shape] = cls
                    dest_inst[shape] = next_id
                    classes[next_id] = cls
                    log.append(EventLogEntry(next_id, "created", mask.background_class, cls, src))
                    next_id += 1
                    placed = True
                    break
        if not placed:
            logger.debug(f"No legal placement for instance {src}; skipped")
            log.append(EventLogEntry(src, "skipped", cls, cls, src))

    next_mask = mask.with_data(data)
    return EventOutcome(
        kind=EventKind.CREATE,
        next_mask=next_mask,
        change=change_mask_of(mask, next_mask),
        next_instances=InstanceMap(inst, classes),
        log=log,
    )


def simulate_remove(mask: SemanticMask, instances: InstanceMap, spec: EventSpec) -> EventOutcome:
    """
    Object removal: selected supports become background.

    Args:
        mask: Semantic mask at time t
        instances: Instances of `mask`
        spec: Event spec with kind=remove

    Returns:
        EventOutcome; the change is the union of removed supports
    """
    if spec.kind != EventKind.REMOVE:
        raise ParameterError(f"expected a remove spec, got {spec.kind.value}", "events")
    _check_pair(mask, instances)
    rng = numpy_rng(spec.rng_seed)
    selected = _select(instances, spec.selection_prob, rng)

    data = mask.data.copy()
    data[np.isin(instances.data, selected)] = mask.background_class
    next_mask = mask.with_data(data)
    log = [
        EventLogEntry(i, "removed", instances.classes[i], mask.background_class)
        for i in selected
    ]
    return EventOutcome(
        kind=EventKind.REMOVE,
        next_mask=next_mask,
        change=change_mask_of(mask, next_mask),
        next_instances=instances.without(selected),
        log=log,
    )


def simulate_edit(mask: SemanticMask, instances: InstanceMap, spec: EventSpec) -> EventOutcome:
    """
    Attribute edit: selected instances redraw their class from the matrix.

    Geometry never changes; only instances whose class actually changed
    contribute to the change mask. An instance edited to the background
    class leaves the instance map.
    """
    if spec.kind != EventKind.EDIT:
        raise ParameterError(f"expected an edit spec, got {spec.kind.value}", "events")
    _check_pair(mask, instances)
    transition = spec.transition
    if transition.num_classes != mask.num_classes:
        raise ParameterError(
            f"transition matrix has {transition.num_classes} classes, mask has {mask.num_classes}",
            "events",
        )
    rng = numpy_rng(spec.rng_seed)
    selected = _select(instances, spec.selection_prob, rng)

    data = mask.data.copy()
    classes = dict(instances.classes)
    dropped: List[int] = []
    log: List[EventLogEntry] = []
    for inst_id in selected:
        old = instances.classes[inst_id]
        new = transition.sample(old, rng)
        if new == old:
            log.append(EventLogEntry(inst_id, "kept", old, old))
            continue
        data[instances.data == inst_id] = new
        if new == mask.background_class:
            dropped.append(inst_id)
            log.append(EventLogEntry(inst_id, "edited_to_background", old, new))
        else:
            classes[inst_id] = new
            log.append(EventLogEntry(inst_id, "edited", old, new))

    next_instances = InstanceMap(instances.data, classes).without(dropped)
    next_mask = mask.with_data(data)
    return EventOutcome(
        kind=EventKind.EDIT,
        next_mask=next_mask,
        change=change_mask_of(mask, next_mask),
        next_instances=next_instances,
        log=log,
    )


def simulate_contour_remove(
    contour: ContourMap,
    instances: InstanceMap,
    spec: EventSpec,
    mask: Optional[SemanticMask] = None,
) -> EventOutcome:
    """
    Remove objects from a contour condition.

    The next-time contour is the current contour erased by the dilated change
    mask, ``(1 - dilate(C, r)) * contour``, rather than contours recomputed
    from the surviving instances: recomputing would resurrect boundary pixels
    that neighboring objects share with the removed ones.

    Args:
        contour: Contour map at time t
        instances: Instances the contour was derived from
        spec: Event spec with kind=contour_remove
        mask: Optional semantic mask kept in step; a class-agnostic
            (background / object) mask is derived from `instances` when omitted

    Returns:
        EventOutcome carrying next_contour and the dilated change
    """
    if spec.kind != EventKind.CONTOUR_REMOVE:
        raise ParameterError(f"expected a contour_remove spec, got {spec.kind.value}", "events")
    if contour.shape != instances.shape:
        raise DimensionError("contour and instance map differ in size", "events")
    if mask is None:
        mask = semantic_from_instances(
            InstanceMap(instances.data, {k: 1 for k in instances.classes}), num_classes=2
        )
    _check_pair(mask, instances)

    rng = numpy_rng(spec.rng_seed)
    selected = _select(instances, spec.selection_prob, rng)

    change = union_of_supports(instances, selected)
    dilated = dilate(change, spec.dilation_radius)
    next_contour = ContourMap(contour.data * (1 - dilated.data))

    data = mask.data.copy()
    data[change.data.astype(bool)] = mask.background_class
    log = [
        EventLogEntry(i, "removed", instances.classes[i], mask.background_class)
        for i in selected
    ]
    return EventOutcome(
        kind=EventKind.CONTOUR_REMOVE,
        next_mask=mask.with_data(data),
        change=change,
        next_instances=instances.without(selected),
        log=log,
        next_contour=next_contour,
        dilated_change=dilated,
    )


_SIMULATORS = {
    EventKind.CREATE: simulate_create,
    EventKind.REMOVE: simulate_remove,
    EventKind.EDIT: simulate_edit,
}


def simulate_event(
    mask: SemanticMask,
    instances: InstanceMap,
    spec: EventSpec,
    contour: Optional[ContourMap] = None,
) -> EventOutcome:
    """Dispatch one event by kind."""
    if spec.kind == EventKind.CONTOUR_REMOVE:
        if contour is None:
            contour = extract_contours(instances)
        return simulate_contour_remove(contour, instances, spec, mask=mask)
    return _SIMULATORS[spec.kind](mask, instances, spec)


def simulate_sequence(
    mask0: SemanticMask,
    instances0: InstanceMap,
    specs: Sequence[EventSpec],
    contour0: Optional[ContourMap] = None,
) -> List[EventOutcome]:
    """
    Chain events; outcome k's next state feeds event k+1.

    Contour-removal steps erase the contour carried from the previous step.
    After a mask-valued event the carried contour is recomputed from the new
    instances.

    Args:
        mask0: Initial semantic mask
        instances0: Initial instances
        specs: One spec per step (non-empty)
        contour0: Initial contour; derived from `instances0` when omitted

    Returns:
        One EventOutcome per spec
    """
    if not specs:
        raise ParameterError("simulate_sequence needs at least one event spec", "events")

    mask, instances = mask0, instances0
    contour = contour0 if contour0 is not None else extract_contours(instances0)
    outcomes: List[EventOutcome] = []
    for k, spec in enumerate(specs):
        outcome = simulate_event(mask, instances, spec, contour=contour)
        logger.debug(
            f"Step {k}: {spec.kind.value} changed {outcome.change.count()} pixels "
            f"({len(outcome.log)} log entries)"
        )
        outcomes.append(outcome)
        mask, instances = outcome.next_mask, outcome.next_instances
        if outcome.next_contour is not None:
            contour = outcome.next_contour
        else:
            contour = extract_contours(instances)
    return outcomes


def cumulative_change(mask0: SemanticMask, outcomes: Sequence[EventOutcome]) -> ChangeMask:
    """Change between the initial mask and the last outcome's mask."""
    if not outcomes:
        return ChangeMask.zeros(*mask0.shape)
    return change_mask_of(mask0, outcomes[-1].next_mask)
