"""
record_store.py - Registros de metadados do nó

Uma linha por registro na tabela `records` (valores em JSON canônico),
indexados em memória na inicialização. Escritor único, muitos leitores.
"""

import json
import logging
import threading
from typing import Callable, Dict, Iterable, List, Optional

from .database import Database
from .metamodel import MetadataRecord, SchemaRegistry
from .protocol import Conflict, canonical_json


logger = logging.getLogger(__name__)


def format_record_id(origin_node: str, counter: int) -> str:
    return f"{origin_node}:{counter:08d}"


class RecordStore:
    def __init__(self, db: Database, registry: SchemaRegistry, node_id: str) -> None:
        self.db = db
        self.registry = registry
        self.node_id = node_id
        self._write_lock = threading.Lock()
        self._records: Dict[str, MetadataRecord] = {}
        self._by_kind: Dict[str, List[str]] = {}
        self._counter = 0
        self._load()

    def _load(self) -> None:
        rows = self.db.fetchall(
            "SELECT record_id, kind, schema_version, origin_node, values_json FROM records ORDER BY record_id"
        )
        for row in rows:
            self._index(MetadataRecord(
                row["record_id"], row["kind"], int(row["schema_version"]),
                json.loads(row["values_json"]), row["origin_node"],
            ))
        logger.info(f"{len(self._records)} registros carregados para {self.node_id}")

    def _index(self, record: MetadataRecord) -> None:
        self._records[record.record_id] = record
        self._by_kind.setdefault(record.kind, []).append(record.record_id)
        origin, _, counter = record.record_id.rpartition(":")
        if origin == self.node_id and counter.isdigit():
            self._counter = max(self._counter, int(counter))

    def allocate_ids(self, n: int) -> List[str]:
        with self._write_lock:
            start = self._counter + 1
            self._counter += n
        return [format_record_id(self.node_id, start + i) for i in range(n)]

    def insert(self, records: Iterable[MetadataRecord],
               extra: Optional[Callable] = None) -> List[MetadataRecord]:
        """
        Valida e grava os registros numa única transação; `extra(conn)`
        participa da mesma transação. O índice em memória só muda após o commit.
        """
        validated = [self.registry.validate_record(r) for r in records]

        def _write(conn):
            for record in validated:
                if record.record_id in self._records:
                    raise Conflict(f"registro já existe: {record.record_id}")
                conn.execute(
                    """
                    INSERT INTO records (record_id, kind, schema_version, origin_node, values_json)
                    VALUES (?, ?, ?, ?, ?)
                    """,
                    (record.record_id, record.kind, record.schema_version,
                     record.origin_node, canonical_json(record.values)),
                )
            if extra is not None:
                extra(conn)

        with self._write_lock:
            self.db.transaction(_write)
            for record in validated:
                self._index(record)
        return validated

    def import_records(self, records: Iterable[MetadataRecord]) -> int:
        """Carrega registros já identificados (ids preservados); idênticos são ignorados"""
        novos = []
        for record in records:
            existing = self._records.get(record.record_id)
            if existing is None:
                novos.append(record)
            elif existing.to_dict() != self.registry.validate_record(record).to_dict():
                raise Conflict(f"registro {record.record_id} divergente do existente")
        if novos:
            self.insert(novos)
        return len(novos)

    def get(self, record_id: str) -> Optional[MetadataRecord]:
        return self._records.get(record_id)

    def by_kind(self, kind: str) -> List[MetadataRecord]:
        ids = list(self._by_kind.get(kind, ()))
        return [self._records[i] for i in ids]

    def all(self) -> List[MetadataRecord]:
        return [self._records[i] for i in sorted(self._records)]

    def count(self, kind: Optional[str] = None) -> int:
        if kind is None:
            return len(self._records)
        return len(self._by_kind.get(kind, ()))
