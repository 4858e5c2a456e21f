"""
client.py - Clientes do protocolo: GridClient (nós) e CatalogueClient
"""

import base64
import logging
import socket
import threading
from typing import Any, Dict, List, Optional, Tuple

from config import CONFIG, parse_address
from .auth_service import AuthToken
from .catalogue import CataloguePage, ReplicaEntry
from .jobs import JobResult, JobSpec
from .protocol import Malformed, MessageKind, Truncated, error_from_reply, recv_frame, send_frame
from .query import ResultSet, SubQuery


logger = logging.getLogger(__name__)


class GridClient:
    """
    Uma conexão autenticada com um servidor da federação. Erros remotos
    voltam como a subclasse de GridError correspondente; falhas de rede
    como OSError (ConnectionError, timeout).
    """

    def __init__(self, address: str, token: AuthToken, timeout: float = CONFIG.socket_timeout) -> None:
        self.address = address
        self.token = token
        self.timeout = timeout
        self.sock: Optional[socket.socket] = None
        self.session: Dict[str, Any] = {}
        self._lock = threading.RLock()

    def __enter__(self) -> "GridClient":
        self.connect()
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def connect(self) -> None:
        if self.sock is not None:
            return
        self.sock = socket.create_connection(parse_address(self.address), timeout=self.timeout)
        try:
            self.session = self._exchange(MessageKind.AUTH, self.token.to_dict(), MessageKind.AUTH_OK)
        except Exception:
            self.close()
            raise

    def close(self) -> None:
        if self.sock is not None:
            try:
                self.sock.close()
            finally:
                self.sock = None

    def _exchange(self, kind: MessageKind, body: Any, expect: MessageKind) -> Dict[str, Any]:
        send_frame(self.sock, kind, body)
        frame = recv_frame(self.sock)
        if frame is None:
            raise ConnectionError(f"{self.address} encerrou a conexão")
        payload = frame.payload()
        if frame.kind == MessageKind.ERROR:
            raise error_from_reply(payload)
        if frame.kind != expect:
            raise Malformed(f"resposta inesperada {frame.kind.name}, esperado {expect.name}")
        return payload

    def request(self, kind: MessageKind, body: Any, expect: MessageKind) -> Dict[str, Any]:
        # uma requisição por vez na mesma conexão
        with self._lock:
            self.connect()
            try:
                return self._exchange(kind, body, expect)
            except (OSError, Truncated):
                self.close()
                raise

    # catálogo (nós encaminham CAT_RESOLVE e CAT_LIST ao catálogo)

    def resolve(self, lfn: str) -> List[ReplicaEntry]:
        payload = self.request(MessageKind.CAT_RESOLVE, {"lfn": lfn}, MessageKind.CAT_RESOLVE)
        return [ReplicaEntry.from_dict(r) for r in payload.get("replicas", [])]

    def list(self, prefix: str = "/", limit: int = CONFIG.list_page_limit, token: Optional[str] = None) -> CataloguePage:
        body = {"prefix": prefix, "limit": limit, "token": token}
        return CataloguePage.from_dict(self.request(MessageKind.CAT_LIST, body, MessageKind.CAT_LIST))

    # consultas

    def subquery(self, sub: SubQuery) -> ResultSet:
        return ResultSet.from_dict(self.request(MessageKind.SUBQUERY, sub.to_dict(), MessageKind.RESULTSET))

    def federated_query(self, text: str) -> ResultSet:
        return ResultSet.from_dict(self.request(MessageKind.FED_QUERY, {"query": text}, MessageKind.RESULTSET))

    # jobs

    def run_job(self, spec: JobSpec) -> JobResult:
        return JobResult.from_dict(self.request(MessageKind.JOB_SUBMIT, spec.to_dict(), MessageKind.JOB_RESULT))

    def job_status(self, job_id: str) -> Dict[str, Any]:
        return self.request(MessageKind.JOB_STATUS, {"job_id": job_id}, MessageKind.JOB_STATUS)

    def job_result(self, job_id: str) -> JobResult:
        return JobResult.from_dict(self.request(MessageKind.JOB_RESULT, {"job_id": job_id}, MessageKind.JOB_RESULT))

    def federated_job(self, algorithm: str, inputs: Optional[List[str]] = None, where: Optional[str] = None,
                      parameters: Optional[Dict[str, Any]] = None,
                      threshold: Optional[int] = None) -> Dict[str, Any]:
        body = {
            "algorithm": algorithm,
            "inputs": list(inputs or []),
            "where": where,
            "parameters": dict(parameters or {}),
            "threshold": threshold,
        }
        return self.request(MessageKind.FED_JOB, body, MessageKind.JOB_RESULT)

    # imagens e ingestão

    def fetch_image(self, lfn: str) -> Tuple[bytes, str]:
        payload = self.request(MessageKind.FETCH_IMAGE, {"lfn": lfn}, MessageKind.IMAGE_DATA)
        try:
            return base64.b64decode(payload["data"], validate=True), str(payload["checksum"])
        except (KeyError, ValueError) as e:
            raise Malformed(f"IMAGE_DATA inválido: {e}")

    def ingest(self, path: str) -> Dict[str, Any]:
        """O contêiner é lido pelo nó no seu próprio sistema de arquivos"""
        return self.request(MessageKind.INGEST, {"path": path}, MessageKind.INGEST_OK)


class CatalogueClient(GridClient):
    """Mesmas operações do FileCatalogue, sobre o fio"""

    def register_file(self, lfn: str, replica: ReplicaEntry) -> ReplicaEntry:
        payload = self.request(MessageKind.CAT_REGISTER, {"lfn": lfn, "replica": replica.to_dict()},
                               MessageKind.CAT_REGISTER)
        return ReplicaEntry.from_dict(payload["entry"])

    def remove_replica(self, lfn: str, node_id: str) -> int:
        payload = self.request(MessageKind.CAT_REMOVE, {"lfn": lfn, "node_id": node_id}, MessageKind.CAT_REMOVE)
        return int(payload["remaining"])
