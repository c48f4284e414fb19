"""Eligibility criteria as two-level logic trees with tri-state verdicts.

Leaves carry unaltered source excerpts; groups combine their children with
ALL/ANY under strong three-valued (Kleene) semantics.  Exclusion criteria
use the same eligibility-oriented convention as inclusion ones: ELIGIBLE
means the criterion does not disqualify the patient, so no polarity flip
happens at aggregation time.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Any, Optional

from .gateway import (
    BackendConfig,
    EnumSchema,
    GatewayRequest,
    ListSchema,
    PromptSection,
    RecordField,
    RecordSchema,
    TaskTag,
    TextSchema,
    Violation,
    complete_structured,
    load_template,
)
from .ingest import PatientRecord


class EmptyGroup(Exception):
    """A group must aggregate at least one child verdict."""


class EmptyCriteria(Exception):
    """The model produced zero criteria for non-empty eligibility text."""


class EvaluationAborted(Exception):
    """A leaf evaluation failed; carries the partial results gathered so far."""

    def __init__(self, node_id: str, cause: Exception, partial: list["CriterionVerdict"]):
        super().__init__(f"evaluation aborted at node {node_id}: {cause}")
        self.node_id = node_id
        self.cause = cause
        self.partial = partial


class Verdict(Enum):
    ELIGIBLE = "ELIGIBLE"
    INELIGIBLE = "INELIGIBLE"
    UNKNOWN = "UNKNOWN"


class Side(Enum):
    INCLUSION = "INCLUSION"
    EXCLUSION = "EXCLUSION"


class NodeKind(Enum):
    LEAF = "LEAF"
    GROUP = "GROUP"


class Connector(Enum):
    ALL = "ALL"
    ANY = "ANY"


VERDICT_TOKENS = ("eligible", "ineligible", "unknown")
_TOKEN_TO_VERDICT = {
    "eligible": Verdict.ELIGIBLE,
    "ineligible": Verdict.INELIGIBLE,
    "unknown": Verdict.UNKNOWN,
}


@dataclass(frozen=True)
class CriterionNode:
    node_id: str
    text: str
    kind: NodeKind
    side: Side
    connector: Optional[Connector] = None
    children: tuple["CriterionNode", ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "children", tuple(self.children))
        if self.kind is NodeKind.LEAF:
            if self.children:
                raise ValueError(f"{self.node_id}: a LEAF cannot have children")
            if self.connector is not None:
                raise ValueError(f"{self.node_id}: a LEAF cannot carry a connector")
        else:
            if not self.children:
                raise ValueError(f"{self.node_id}: a GROUP needs at least one child")
            if self.connector is None:
                raise ValueError(f"{self.node_id}: a GROUP needs a connector")
            # Two levels below any root: a group child's children are leaves.
            for child in self.children:
                if child.kind is NodeKind.GROUP and any(
                    grandchild.kind is not NodeKind.LEAF for grandchild in child.children
                ):
                    raise ValueError(f"{self.node_id}: nesting exceeds two levels below the root")


@dataclass(frozen=True)
class CriterionTree:
    """Implicit ALL root per side; standalone criteria are direct leaf children.

    A side with zero criteria (common for exclusions) is represented as None.
    """

    inclusion: Optional[CriterionNode]
    exclusion: Optional[CriterionNode]

    def __post_init__(self) -> None:
        ids = [n.node_id for n in self.walk()]
        if len(set(ids)) != len(ids):
            raise ValueError("node_ids must be unique within a tree")

    def walk(self):
        for root in (self.inclusion, self.exclusion):
            if root is None:
                continue
            yield root
            for node in root.children:
                yield node
                yield from node.children

    def leaves(self) -> list[CriterionNode]:
        return [n for n in self.walk() if n.kind is NodeKind.LEAF]

    def node(self, node_id: str) -> CriterionNode:
        for n in self.walk():
            if n.node_id == node_id:
                return n
        raise KeyError(node_id)


@dataclass(frozen=True)
class CriterionVerdict:
    node_id: str
    verdict: Verdict
    reasoning: str


@dataclass(frozen=True)
class TrialScore:
    """Counts over evaluated leaves; ratio absent when nothing was decided."""

    n_eligible: int
    n_ineligible: int
    n_unknown: int

    @property
    def fulfilled_ratio(self) -> Optional[float]:
        decided = self.n_eligible + self.n_ineligible
        return self.n_eligible / decided if decided else None

    def to_record(self) -> dict:
        return {
            "n_eligible": self.n_eligible,
            "n_ineligible": self.n_ineligible,
            "n_unknown": self.n_unknown,
            "fulfilled_ratio": self.fulfilled_ratio,
        }


def aggregate(connector: Connector, child_verdicts: list[Verdict]) -> Verdict:
    """Strong three-valued (Kleene) combination of child verdicts."""
    if not isinstance(connector, Connector):
        raise TypeError(f"connector must be a Connector, got {connector!r}")
    if not child_verdicts:
        raise EmptyGroup("cannot aggregate an empty child list")
    if connector is Connector.ALL:
        if any(v is Verdict.INELIGIBLE for v in child_verdicts):
            return Verdict.INELIGIBLE
        if any(v is Verdict.UNKNOWN for v in child_verdicts):
            return Verdict.UNKNOWN
        return Verdict.ELIGIBLE
    if any(v is Verdict.ELIGIBLE for v in child_verdicts):
        return Verdict.ELIGIBLE
    if any(v is Verdict.UNKNOWN for v in child_verdicts):
        return Verdict.UNKNOWN
    return Verdict.INELIGIBLE


# ---------------------------------------------------------------------------
# Structuring via the gateway
# ---------------------------------------------------------------------------

def _criteria_schema() -> ListSchema:
    leaf = RecordSchema((RecordField("text", TextSchema()),))
    node = RecordSchema(
        (
            RecordField("text", TextSchema()),
            RecordField("connector", EnumSchema(("ALL", "ANY")), required=False),
            RecordField("children", ListSchema(leaf), required=False),
        )
    )
    return ListSchema(node)


def _structure_post_validator(source_text: str):
    def check(value: Any) -> list[Violation]:
        violations: list[Violation] = []
        for i, node in enumerate(value):
            has_children = bool(node.get("children"))
            has_connector = node.get("connector") is not None
            if node.get("children") == []:
                violations.append(Violation(f"[{i}].children", "a group needs at least one child"))
            if has_children and not has_connector:
                violations.append(Violation(f"[{i}].connector", "a node with children needs a connector"))
            if has_connector and not has_children:
                violations.append(Violation(f"[{i}].children", "a connector requires children"))
            if has_children:
                for j, child in enumerate(node["children"]):
                    if child["text"] not in source_text:
                        violations.append(
                            Violation(f"[{i}].children[{j}].text", "must be an unaltered excerpt of the source")
                        )
            else:
                if node["text"] not in source_text:
                    violations.append(Violation(f"[{i}].text", "must be an unaltered excerpt of the source"))
        return violations

    return check


def _build_side(side: Side, prefix: str, nodes: list[dict]) -> Optional[CriterionNode]:
    children = []
    for i, raw in enumerate(nodes, start=1):
        node_id = f"{prefix}.{i}"
        if raw.get("children"):
            leaves = tuple(
                CriterionNode(node_id=f"{node_id}.{j}", text=child["text"], kind=NodeKind.LEAF, side=side)
                for j, child in enumerate(raw["children"], start=1)
            )
            children.append(
                CriterionNode(
                    node_id=node_id,
                    text=raw["text"],
                    kind=NodeKind.GROUP,
                    side=side,
                    connector=Connector(raw["connector"]),
                    children=leaves,
                )
            )
        else:
            children.append(CriterionNode(node_id=node_id, text=raw["text"], kind=NodeKind.LEAF, side=side))
    if not children:
        return None
    return CriterionNode(
        node_id=prefix, text="", kind=NodeKind.GROUP, side=side, connector=Connector.ALL, children=tuple(children)
    )


def structure_criteria(eligibility_text: str, backend: BackendConfig) -> CriterionTree:
    """Turn raw eligibility text into a two-level tree, one gateway call per side.

    Every leaf text is checked to be a contiguous, unaltered excerpt of the
    source; violations feed the gateway retry loop like schema violations.
    """
    if not eligibility_text or not eligibility_text.strip():
        raise ValueError("eligibility text is empty")
    instruction = load_template(TaskTag.STRUCTURE_CRITERIA)
    schema = _criteria_schema()
    sides: dict[str, list[dict]] = {}
    for side_name in ("inclusion", "exclusion"):
        request = GatewayRequest(
            task_tag=TaskTag.STRUCTURE_CRITERIA,
            sections=(
                PromptSection("instruction", instruction),
                PromptSection("side", side_name),
                PromptSection("eligibility text", eligibility_text),
            ),
            schema=schema,
        )
        sides[side_name] = complete_structured(
            request, backend, post_validate=_structure_post_validator(eligibility_text)
        )
    if not sides["inclusion"] and not sides["exclusion"]:
        raise EmptyCriteria("model produced zero criteria for non-empty eligibility text")
    return CriterionTree(
        inclusion=_build_side(Side.INCLUSION, "inc", sides["inclusion"]),
        exclusion=_build_side(Side.EXCLUSION, "exc", sides["exclusion"]),
    )


# ---------------------------------------------------------------------------
# Evaluation via the gateway
# ---------------------------------------------------------------------------

_VERDICT_SCHEMA = RecordSchema(
    (
        RecordField("verdict", EnumSchema(VERDICT_TOKENS)),
        RecordField("reasoning", TextSchema()),
    )
)


def _reasoning_non_empty(value: Any) -> list[Violation]:
    if isinstance(value, dict) and not str(value.get("reasoning", "")).strip():
        return [Violation(".reasoning", "reasoning must be non-empty")]
    return []


def evaluate_leaf(
    node: CriterionNode,
    patient: PatientRecord,
    trial_context: str,
    backend: BackendConfig,
) -> CriterionVerdict:
    """Ask the gateway for one leaf's tri-state verdict plus reasoning."""
    if node.kind is not NodeKind.LEAF:
        raise ValueError(f"{node.node_id} is not a LEAF")
    request = GatewayRequest(
        task_tag=TaskTag.EVALUATE_CRITERION,
        sections=(
            PromptSection("instruction", load_template(TaskTag.EVALUATE_CRITERION)),
            PromptSection("patient record", patient.ehr_text),
            PromptSection("trial context", trial_context),
            PromptSection("criterion", f"[{node.side.value.lower()}] {node.text}"),
        ),
        schema=_VERDICT_SCHEMA,
    )
    value = complete_structured(request, backend, post_validate=_reasoning_non_empty)
    return CriterionVerdict(
        node_id=node.node_id,
        verdict=_TOKEN_TO_VERDICT[value["verdict"]],
        reasoning=value["reasoning"],
    )


def _node_sort_key(node_id: str) -> tuple:
    parts = node_id.split(".")
    return (parts[0],) + tuple(int(p) if p.isdigit() else p for p in parts[1:])


def assemble_results(tree: CriterionTree, leaf_verdicts: dict[str, CriterionVerdict]) -> tuple[list[CriterionVerdict], TrialScore]:
    """Combine leaf verdicts into group verdicts and a score.

    Depends only on the set of leaf verdicts, never on the order they were
    produced in; output is canonically ordered by node_id.
    """
    results: dict[str, CriterionVerdict] = {}
    counts = {Verdict.ELIGIBLE: 0, Verdict.INELIGIBLE: 0, Verdict.UNKNOWN: 0}

    def resolve(node: CriterionNode) -> Verdict:
        if node.kind is NodeKind.LEAF:
            verdict = leaf_verdicts[node.node_id]
            results[node.node_id] = verdict
            counts[verdict.verdict] += 1
            return verdict.verdict
        child_verdicts = [resolve(child) for child in node.children]
        combined = aggregate(node.connector, child_verdicts)
        results[node.node_id] = CriterionVerdict(
            node_id=node.node_id,
            verdict=combined,
            reasoning=f"{node.connector.value} over {len(child_verdicts)} children",
        )
        return combined

    if tree.inclusion is not None:
        resolve(tree.inclusion)
    if tree.exclusion is not None:
        resolve(tree.exclusion)
    ordered = [results[k] for k in sorted(results, key=_node_sort_key)]
    score = TrialScore(
        n_eligible=counts[Verdict.ELIGIBLE],
        n_ineligible=counts[Verdict.INELIGIBLE],
        n_unknown=counts[Verdict.UNKNOWN],
    )
    return ordered, score


def evaluate_tree(
    tree: CriterionTree,
    patient: PatientRecord,
    trial_context: str,
    backend: BackendConfig,
    max_workers: int = 1,
) -> tuple[list[CriterionVerdict], TrialScore]:
    """Evaluate every leaf (independently; concurrently when max_workers > 1)
    and aggregate groups.

    A failing leaf aborts with EvaluationAborted carrying the partial
    verdict list gathered so far.
    """
    leaves = tree.leaves()
    verdicts: dict[str, CriterionVerdict] = {}
    if max_workers > 1 and len(leaves) > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            futures = {leaf.node_id: pool.submit(evaluate_leaf, leaf, patient, trial_context, backend) for leaf in leaves}
        for node_id, future in futures.items():
            exc = future.exception()
            if exc is not None:
                partial = sorted(verdicts.values(), key=lambda v: _node_sort_key(v.node_id))
                raise EvaluationAborted(node_id, exc, list(partial))
            verdicts[node_id] = future.result()
    else:
        for leaf in leaves:
            try:
                verdicts[leaf.node_id] = evaluate_leaf(leaf, patient, trial_context, backend)
            except Exception as exc:
                partial = sorted(verdicts.values(), key=lambda v: _node_sort_key(v.node_id))
                raise EvaluationAborted(leaf.node_id, exc, list(partial)) from exc
    return assemble_results(tree, verdicts)


# ---------------------------------------------------------------------------
# Serialization (canonical record format shared with evalkit / review UI)
# ---------------------------------------------------------------------------

def node_to_record(node: CriterionNode) -> dict:
    record = {
        "node_id": node.node_id,
        "text": node.text,
        "kind": node.kind.value,
        "side": node.side.value,
    }
    if node.connector is not None:
        record["connector"] = node.connector.value
    if node.children:
        record["children"] = [node_to_record(c) for c in node.children]
    return record


def node_from_record(record: dict) -> CriterionNode:
    children = tuple(node_from_record(c) for c in record.get("children", ()))
    return CriterionNode(
        node_id=record["node_id"],
        text=record["text"],
        kind=NodeKind(record["kind"]),
        side=Side(record["side"]),
        connector=Connector(record["connector"]) if record.get("connector") else None,
        children=children,
    )


def tree_to_record(tree: CriterionTree) -> dict:
    return {
        "inclusion": node_to_record(tree.inclusion) if tree.inclusion else None,
        "exclusion": node_to_record(tree.exclusion) if tree.exclusion else None,
    }


def tree_from_record(record: dict) -> CriterionTree:
    return CriterionTree(
        inclusion=node_from_record(record["inclusion"]) if record.get("inclusion") else None,
        exclusion=node_from_record(record["exclusion"]) if record.get("exclusion") else None,
    )


def verdict_to_record(verdict: CriterionVerdict) -> dict:
    return {"node_id": verdict.node_id, "verdict": verdict.verdict.value, "reasoning": verdict.reasoning}


def verdict_from_record(record: dict) -> CriterionVerdict:
    return CriterionVerdict(
        node_id=record["node_id"],
        verdict=Verdict(record["verdict"]),
        reasoning=record.get("reasoning", ""),
    )
