"""
mediator.py - Consultas federadas e posicionamento de jobs

Decompõe a consulta em sub-consultas idênticas (uma por nó), executa-as
em paralelo, combina os resultados e decide, por arquivo, se o job vai
até o dado ou se o dado vem até o solicitante.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Optional, Tuple

from config import CONFIG
from .catalogue import ReplicaEntry
from .jobs import JobEntry, JobResult, JobSpec
from .protocol import EmptyFederation, GridError, IntegrityError, NotFound, Truncated, UnknownAlgorithm
from .query import Query, ResultSet, SubQuery, merge_results, parse_query, validate_query
from .security import Security


logger = logging.getLogger(__name__)

EXECUTE_AT_DATA = "execute_at_data"
REPLICATE_TO_REQUESTER = "replicate_to_requester"

# falhas de rede que tornam um nó inalcançável
UNREACHABLE_ERRORS = (OSError, Truncated)


def decompose(query: Query, live_nodes: Iterable[str]) -> List[SubQuery]:
    """
    Uma sub-consulta por nó do roster (ou da interseção com AT), todas com
    o mesmo predicado e a mesma projeção da consulta original.

    Raises:
        EmptyFederation: roster vazio
    """
    nodes = sorted(set(live_nodes))
    if not nodes:
        raise EmptyFederation("nenhum nó ativo na federação")
    if query.site_filter is not None:
        wanted = set(query.site_filter)
        nodes = [n for n in nodes if n in wanted]
    return [SubQuery(n, query.kind, query.predicate, query.projection) for n in nodes]


@dataclass(frozen=True)
class PlacementChoice:
    lfn: str
    mode: str
    node_id: Optional[str]
    size_bytes: int
    rationale: str

    def to_dict(self) -> Dict[str, Any]:
        return {
            "lfn": self.lfn,
            "mode": self.mode,
            "node_id": self.node_id,
            "size_bytes": self.size_bytes,
            "rationale": self.rationale,
        }


@dataclass(frozen=True)
class PlacementDecision:
    choices: Dict[str, PlacementChoice]
    threshold: int
    replicas: Dict[str, List[ReplicaEntry]] = field(default_factory=dict)

    @property
    def total_bytes(self) -> int:
        return sum(c.size_bytes for c in self.choices.values())

    def bytes_moved(self, requester: str) -> int:
        """Bytes transferidos: réplicas trazidas ao solicitante que ainda não as tem"""
        moved = 0
        for lfn, choice in self.choices.items():
            local = any(r.node_id == requester for r in self.replicas.get(lfn, []))
            if choice.mode == REPLICATE_TO_REQUESTER and not local:
                moved += choice.size_bytes
        return moved

    def to_dict(self) -> Dict[str, Any]:
        return {
            "threshold": self.threshold,
            "total_bytes": self.total_bytes,
            "choices": [self.choices[lfn].to_dict() for lfn in sorted(self.choices)],
        }


def place_job(spec: JobSpec, resolve: Callable[[str], List[ReplicaEntry]], threshold: int) -> PlacementDecision:
    """
    Para cada lfn: tamanho > threshold -> execute_at_data no nó com réplica
    que guarda mais entradas do job (empate: menor node_id); caso
    contrário replicate_to_requester.

    Raises:
        NotFound: lfn sem réplicas
    """
    replicas = {lfn: resolve(lfn) for lfn in dict.fromkeys(spec.inputs)}
    holding: Dict[str, int] = {}
    for entries in replicas.values():
        for node in {r.node_id for r in entries}:
            holding[node] = holding.get(node, 0) + 1
    choices = {}
    for lfn, entries in replicas.items():
        if not entries:
            raise NotFound(f"LFN sem réplicas: {lfn}")
        size = entries[0].size_bytes
        if size > threshold:
            best = min(entries, key=lambda r: (-holding[r.node_id], r.node_id))
            choices[lfn] = PlacementChoice(lfn, EXECUTE_AT_DATA, best.node_id, size, f"{size} > {threshold} bytes")
        else:
            choices[lfn] = PlacementChoice(lfn, REPLICATE_TO_REQUESTER, None, size, f"{size} <= {threshold} bytes")
    return PlacementDecision(choices, threshold, replicas)


class Mediator:
    """
    Roda dentro do processo do nó solicitante. `connect(node_id)` devolve
    um GridClient autenticado para outro nó; o próprio nó é atendido sem
    passar pela rede.
    """

    def __init__(self, node_id: str, live_nodes: Callable[[], Dict[str, str]],
                 connect: Callable[[str], Any], catalogue: Any, registry: Any,
                 local: Any = None, threshold: int = CONFIG.placement_threshold_bytes,
                 max_workers: int = CONFIG.job_workers) -> None:
        self.node_id = node_id
        self.live_nodes = live_nodes
        self.connect = connect
        self.catalogue = catalogue
        self.registry = registry
        self.local = local
        self.threshold = threshold
        self.max_workers = max(1, max_workers)

    # ------------------------------------------------------------ consultas

    def parse(self, text: str) -> Query:
        query = parse_query(text)
        validate_query(query, self.registry)
        return query

    def _run_subquery(self, sub: SubQuery) -> ResultSet:
        if sub.target_node == self.node_id and self.local is not None:
            return self.local.local_query(sub)
        client = self.connect(sub.target_node)
        try:
            return client.subquery(sub)
        finally:
            client.close()

    def execute_federated(self, query: Any) -> ResultSet:
        """
        Executa as sub-consultas em paralelo e combina os resultados.
        Nós inalcançáveis aparecem em `unreachable` (status partial).
        """
        if isinstance(query, str):
            query = self.parse(query)
        else:
            validate_query(query, self.registry)
        subs = decompose(query, self.live_nodes())
        parts = [ResultSet(query.kind, tuple(query.projection))]
        unreachable = []
        with ThreadPoolExecutor(max_workers=min(self.max_workers, max(1, len(subs)))) as pool:
            futures = [(sub, pool.submit(self._run_subquery, sub)) for sub in subs]
            for sub, future in futures:
                try:
                    parts.append(future.result())
                except UNREACHABLE_ERRORS as e:
                    logger.warning(f"Nó {sub.target_node} inalcançável na consulta: {e}")
                    unreachable.append(sub.target_node)
        if unreachable:
            parts.append(ResultSet(query.kind, tuple(query.projection), [], (), tuple(unreachable)))
        return merge_results(parts)

    def select_inputs(self, where: str) -> List[str]:
        """LFNs das imagens que satisfazem o predicado (mesma coluna que a consulta devolve)"""
        result = self.execute_federated(f"FIND image PROJECT lfn WHERE {where}")
        return [row.values["lfn"] for row in result.rows if "lfn" in row.values]

    # ------------------------------------------------------------ jobs

    def place_job(self, spec: JobSpec, threshold: Optional[int] = None) -> PlacementDecision:
        return place_job(spec, self.catalogue.resolve, self.threshold if threshold is None else threshold)

    def _remote_job(self, node_id: str, spec: JobSpec) -> JobResult:
        if node_id == self.node_id and self.local is not None:
            return self.local.run_job(spec)
        client = self.connect(node_id)
        try:
            return client.run_job(spec)
        finally:
            client.close()

    def _fetch(self, lfn: str, replicas: List[ReplicaEntry]) -> bytes:
        """
        Traz os bytes de uma réplica e confere o SHA-256 com o catálogo.
        A cópia é transitória: nada é gravado no nó solicitante. Réplica
        ausente ou divergente passa para a próxima na ordem de resolução.

        Raises:
            IntegrityError: nenhuma réplica confere com o catálogo
            NotFound: todas as réplicas sumiram dos nós
            ConnectionError: réplicas restantes inalcançáveis
        """
        expected = replicas[0].checksum
        ordered = sorted(replicas, key=lambda r: (r.node_id != self.node_id, r.node_id))
        unreachable: Optional[Exception] = None
        failure: Optional[GridError] = None
        for replica in ordered:
            try:
                if replica.node_id == self.node_id and self.local is not None:
                    data, _ = self.local.fetch_image(lfn)
                else:
                    client = self.connect(replica.node_id)
                    try:
                        data, _ = client.fetch_image(lfn)
                    finally:
                        client.close()
            except UNREACHABLE_ERRORS as e:
                unreachable = e
                continue
            except NotFound as e:
                logger.warning(f"Réplica de {lfn} em {replica.node_id} ausente: {e.detail}")
                failure = failure or e
                continue
            if not Security.digests_match(expected, Security.sha256_hex(data)):
                logger.warning(f"Réplica de {lfn} em {replica.node_id} não confere com o catálogo")
                failure = IntegrityError(f"checksum de {lfn} não confere com o catálogo")
                continue
            return data
        if isinstance(failure, IntegrityError) or (failure is not None and unreachable is None):
            raise failure
        raise ConnectionError(f"nenhuma réplica de {lfn} alcançável: {unreachable}")

    def _collect(self, lfn: str, fetch: Callable[[], bytes], blobs: Dict[str, bytes],
                 entries: Dict[str, JobEntry]) -> None:
        try:
            blobs[lfn] = fetch()
        except UNREACHABLE_ERRORS as e:
            entries[lfn] = JobEntry(lfn, "unreachable", {}, str(e), "")
        except GridError as e:
            entries[lfn] = JobEntry(lfn, "error", {}, f"{e.name}: {e.detail}", self.node_id)

    def run_federated_job(self, spec: JobSpec, threshold: Optional[int] = None,
                          decision: Optional[PlacementDecision] = None) -> Tuple[JobResult, PlacementDecision]:
        """
        Despacha conforme o posicionamento e agrega uma entrada por lfn.
        Falha de checksum ou de domínio afeta só aquele lfn; nó inalcançável
        marca suas entradas como unreachable. Nó que não tem mais a réplica
        listada no catálogo faz as entradas voltarem a ser buscadas.
        """
        decision = decision or self.place_job(spec, threshold)
        remote: Dict[str, List[str]] = {}
        fetched: List[str] = []
        for lfn in spec.inputs:
            choice = decision.choices[lfn]
            if choice.mode == EXECUTE_AT_DATA:
                remote.setdefault(choice.node_id, []).append(lfn)
            else:
                fetched.append(lfn)

        entries: Dict[str, JobEntry] = {}
        unreachable: List[str] = []
        blobs: Dict[str, bytes] = {}
        with ThreadPoolExecutor(max_workers=self.max_workers) as pool:
            remote_futures = {
                node: pool.submit(self._remote_job, node, spec.with_inputs(lfns))
                for node, lfns in sorted(remote.items())
            }
            fetch_futures = {lfn: pool.submit(self._fetch, lfn, decision.replicas[lfn]) for lfn in fetched}
            for lfn, future in fetch_futures.items():
                self._collect(lfn, future.result, blobs, entries)

            stale: List[str] = []
            for node, future in remote_futures.items():
                try:
                    entries.update(future.result().entries)
                except UNREACHABLE_ERRORS as e:
                    logger.warning(f"Nó {node} inalcançável no job {spec.job_id}: {e}")
                    unreachable.append(node)
                    for lfn in remote[node]:
                        entries[lfn] = JobEntry(lfn, "unreachable", {}, f"{node} inalcançável", node)
                except UnknownAlgorithm as e:
                    for lfn in remote[node]:
                        entries[lfn] = JobEntry(lfn, "error", {}, f"{e.name}: {e.detail}", node)
                except NotFound as e:
                    logger.warning(f"Nó {node} sem réplica no job {spec.job_id}: {e.detail}")
                    stale.extend(remote[node])
                except GridError as e:
                    for lfn in remote[node]:
                        entries[lfn] = JobEntry(lfn, "error", {}, f"{e.name}: {e.detail}", node)
            retry = {lfn: pool.submit(self._fetch, lfn, decision.replicas[lfn]) for lfn in stale}
            for lfn, future in retry.items():
                self._collect(lfn, future.result, blobs, entries)

        if blobs:
            entries.update(self.local.run_on_blobs(spec.with_inputs(sorted(blobs)), blobs).entries)
        for lfn, entry in entries.items():
            if entry.status == "unreachable" and not entry.executed_at:
                unreachable.extend(r.node_id for r in decision.replicas.get(lfn, []))
        return JobResult(spec.job_id, spec.algorithm, entries, tuple(sorted(set(unreachable)))), decision
