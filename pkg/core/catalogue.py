"""
catalogue.py - Catálogo virtual de arquivos (LFN -> réplicas)

Persistência em log append-only (uma linha JSON por mutação),
compactado na inicialização.
"""

import bisect
import json
import logging
import os
import re
import threading
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional

from .protocol import Conflict, Malformed, NotFound, canonical_json
from .security import Formatters, Security


logger = logging.getLogger(__name__)

_COMPONENT = re.compile(r"^[A-Za-z0-9._-]+$")


def validate_lfn(lfn: str) -> str:
    if not isinstance(lfn, str) or not lfn.startswith("/") or lfn == "/":
        raise Malformed(f"LFN inválido: {lfn!r}")
    components = lfn[1:].split("/")
    if not all(_COMPONENT.match(c) for c in components):
        raise Malformed(f"LFN inválido: {lfn!r}")
    return lfn


def validate_prefix(prefix: str) -> str:
    if prefix == "/":
        return prefix
    validate_lfn(prefix[:-1] if prefix.endswith("/") else prefix)
    return prefix


@dataclass(frozen=True)
class ReplicaEntry:
    lfn: str
    node_id: str
    local_path: str
    size_bytes: int
    checksum: str
    registered_at: str = ""

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "ReplicaEntry":
        try:
            entry = cls(
                lfn=str(data["lfn"]),
                node_id=str(data["node_id"]),
                local_path=str(data["local_path"]),
                size_bytes=int(data["size_bytes"]),
                checksum=str(data["checksum"]),
                registered_at=str(data.get("registered_at") or ""),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise Malformed(f"réplica inválida: {e}")
        validate_lfn(entry.lfn)
        if entry.size_bytes < 0 or not Security.is_checksum(entry.checksum) or not entry.node_id:
            raise Malformed(f"réplica inválida para {entry.lfn}")
        return entry


@dataclass(frozen=True)
class CataloguePage:
    names: List[str]
    next_token: Optional[str] = None

    def to_dict(self) -> Dict:
        return {"names": list(self.names), "next_token": self.next_token}

    @classmethod
    def from_dict(cls, data: Dict) -> "CataloguePage":
        return cls(list(data.get("names", [])), data.get("next_token"))


class FileCatalogue:
    """
    Catálogo de réplicas com escritor único. Toda mutação é gravada
    (e opcionalmente sincronizada em disco) antes de ficar visível.
    """

    def __init__(self, log_path: str, fsync: bool = True) -> None:
        self.log_path = log_path
        self.fsync = fsync
        self._lock = threading.RLock()
        self._index: Dict[str, Dict[str, ReplicaEntry]] = {}
        self._sorted_names: Optional[List[str]] = None
        os.makedirs(os.path.dirname(os.path.abspath(log_path)), exist_ok=True)
        self._replay()
        self._compact()
        self._log = open(self.log_path, "a", encoding="utf-8")

    def close(self) -> None:
        with self._lock:
            if not self._log.closed:
                self._log.close()

    def _replay(self) -> None:
        """
        Reaplica o log. Só a última linha pode estar incompleta (queda no
        meio de uma gravação); qualquer outra linha ilegível é Malformed.
        """
        if not os.path.exists(self.log_path):
            return
        with open(self.log_path, "r", encoding="utf-8") as f:
            lines = [(numero, line.strip()) for numero, line in enumerate(f, start=1) if line.strip()]
        aplicadas = 0
        for pos, (numero, line) in enumerate(lines):
            try:
                self._apply(json.loads(line))
            except (ValueError, KeyError, TypeError, AttributeError) as e:
                if pos == len(lines) - 1:
                    logger.warning(f"Linha final {numero} do log do catálogo ignorada (gravação incompleta)")
                    continue
                raise Malformed(f"log do catálogo {self.log_path}, linha {numero}: {e!r}")
            aplicadas += 1
        logger.info(f"Catálogo recuperado: {aplicadas} mutações, {len(self._index)} LFNs")

    def _apply(self, rec: Dict) -> None:
        op = rec.get("op")
        if op == "register":
            entry = ReplicaEntry(
                rec["lfn"], rec["node_id"], rec["local_path"],
                int(rec["size"]), rec["checksum"], rec["timestamp"],
            )
            self._index.setdefault(entry.lfn, {})[entry.node_id] = entry
        elif op == "remove":
            lfn, node_id = rec["lfn"], rec["node_id"]
            replicas = self._index.get(lfn, {})
            replicas.pop(node_id, None)
            if not replicas:
                self._index.pop(lfn, None)
        else:
            raise ValueError(f"operação desconhecida: {op!r}")

    def _compact(self) -> None:
        tmp_path = self.log_path + ".tmp"
        with open(tmp_path, "w", encoding="utf-8") as f:
            for lfn in sorted(self._index):
                for node_id in sorted(self._index[lfn]):
                    f.write(self._record("register", self._index[lfn][node_id]) + "\n")
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp_path, self.log_path)

    @staticmethod
    def _record(op: str, entry: ReplicaEntry) -> str:
        return canonical_json({
            "op": op,
            "lfn": entry.lfn,
            "node_id": entry.node_id,
            "local_path": entry.local_path,
            "size": entry.size_bytes,
            "checksum": entry.checksum,
            "timestamp": entry.registered_at,
        })

    def _append(self, op: str, entry: ReplicaEntry) -> None:
        self._log.write(self._record(op, entry) + "\n")
        self._log.flush()
        if self.fsync:
            os.fsync(self._log.fileno())

    def register_file(self, lfn: str, replica: ReplicaEntry) -> ReplicaEntry:
        """
        Registra uma réplica de lfn.

        Raises:
            Malformed: LFN inválido ou divergente da réplica
            Conflict: (lfn, node_id) já existe ou checksum/tamanho divergente
        """
        validate_lfn(lfn)
        if replica.lfn != lfn:
            raise Malformed(f"réplica pertence a {replica.lfn}, não a {lfn}")
        if not Security.is_checksum(replica.checksum):
            raise Malformed(f"checksum inválido para {lfn}")
        with self._lock:
            existing = self._index.get(lfn, {})
            if replica.node_id in existing:
                raise Conflict(f"{lfn} já possui réplica em {replica.node_id}")
            for other in existing.values():
                if other.checksum != replica.checksum or other.size_bytes != replica.size_bytes:
                    raise Conflict(f"{lfn} já registrado com checksum diferente")
            entry = ReplicaEntry(
                lfn, replica.node_id, replica.local_path, replica.size_bytes,
                replica.checksum, replica.registered_at or Formatters.utc_now_iso(),
            )
            self._append("register", entry)
            if lfn not in self._index:
                self._sorted_names = None
            self._index.setdefault(lfn, {})[entry.node_id] = entry
            return entry

    def resolve(self, lfn: str) -> List[ReplicaEntry]:
        validate_lfn(lfn)
        with self._lock:
            replicas = self._index.get(lfn)
            if not replicas:
                raise NotFound(f"LFN sem réplicas: {lfn}")
            return [replicas[n] for n in sorted(replicas)]

    def remove_replica(self, lfn: str, node_id: str) -> int:
        validate_lfn(lfn)
        with self._lock:
            replicas = self._index.get(lfn, {})
            entry = replicas.get(node_id)
            if entry is None:
                raise NotFound(f"{lfn} não possui réplica em {node_id}")
            self._append("remove", entry)
            del replicas[node_id]
            if not replicas:
                del self._index[lfn]
                self._sorted_names = None
            return len(replicas)

    def list(self, prefix: str = "/", limit: int = 100, token: Optional[str] = None) -> CataloguePage:
        """
        Nomes sob o prefixo, em ordem, respeitando fronteiras de componente:
        "/site-A" casa com "/site-A/x" mas não com "/site-AB/x".
        """
        validate_prefix(prefix)
        if limit <= 0:
            raise Malformed("limit deve ser positivo")
        with self._lock:
            if self._sorted_names is None:
                self._sorted_names = sorted(self._index)
            names = self._sorted_names
        base = prefix.rstrip("/")
        # candidatos com o mesmo início textual são contíguos na ordem lexicográfica
        i = bisect.bisect_left(names, base)
        if token:
            i = max(i, bisect.bisect_right(names, token))
        page: List[str] = []
        has_more = False
        while i < len(names) and names[i].startswith(base):
            name = names[i]
            if name == prefix or name.startswith(base + "/"):
                if len(page) == limit:
                    has_more = True
                    break
                page.append(name)
            i += 1
        return CataloguePage(page, page[-1] if (has_more and page) else None)

    def __len__(self) -> int:
        with self._lock:
            return len(self._index)
