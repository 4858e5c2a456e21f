"""
catalogue_server.py - Serviço de catálogo sobre o protocolo (0x10-0x13)
"""

import logging
import os
from typing import Any, Dict, Optional

from config import CONFIG, CatalogueConfig
from .auth_service import AuditLog, Auth, Roster, Session
from .catalogue import FileCatalogue, ReplicaEntry
from .database import Database
from .node import SYSTEM_USER, install_file_log
from .protocol import Malformed, MessageKind, Unauthorized
from .server import GridServer


logger = logging.getLogger(__name__)


class CatalogueServer(GridServer):
    """
    Registro e remoção só pelo próprio nó dono da réplica (ou ADMIN);
    resolução e listagem para qualquer sessão autenticada.
    """

    def __init__(self, catalogue: FileCatalogue, listen_address: str, auth: Auth,
                 audit: Optional[AuditLog] = None, socket_timeout: float = CONFIG.socket_timeout) -> None:
        super().__init__(listen_address, "catalogue", auth, audit, socket_timeout)
        self.catalogue = catalogue
        self.add(MessageKind.CAT_REGISTER, self._register)
        self.add(MessageKind.CAT_RESOLVE, self._resolve)
        self.add(MessageKind.CAT_LIST, self._list)
        self.add(MessageKind.CAT_REMOVE, self._remove)

    def _owner_or_admin(self, session: Session, node_id: str, acao: str) -> None:
        if session.role == "ADMIN" or session.node_id == node_id:
            return
        self.audit_event(session.node_id, "CATALOGO", "Acesso negado", f"{acao} em nome de {node_id}", session.peer)
        raise Unauthorized(f"{session.node_id} não pode alterar réplicas de {node_id}")

    def _register(self, session: Session, body: Dict[str, Any]):
        if not isinstance(body.get("replica"), dict):
            raise Malformed("CAT_REGISTER requer lfn e replica")
        replica = ReplicaEntry.from_dict(body["replica"])
        self._owner_or_admin(session, replica.node_id, "registro")
        entry = self.catalogue.register_file(str(body.get("lfn", "")), replica)
        self.audit_event(session.node_id, "CATALOGO", "Réplica registrada", f"{entry.lfn} @ {entry.node_id}",
                         session.peer)
        return MessageKind.CAT_REGISTER, {"entry": entry.to_dict()}

    def _resolve(self, session: Session, body: Dict[str, Any]):
        replicas = self.catalogue.resolve(str(body.get("lfn", "")))
        return MessageKind.CAT_RESOLVE, {"replicas": [r.to_dict() for r in replicas]}

    def _list(self, session: Session, body: Dict[str, Any]):
        try:
            limit = int(body.get("limit") or CONFIG.list_page_limit)
        except (TypeError, ValueError):
            raise Malformed("limit deve ser inteiro")
        page = self.catalogue.list(str(body.get("prefix") or "/"), limit, body.get("token"))
        return MessageKind.CAT_LIST, page.to_dict()

    def _remove(self, session: Session, body: Dict[str, Any]):
        lfn, node_id = str(body.get("lfn", "")), str(body.get("node_id", ""))
        self._owner_or_admin(session, node_id, "remoção")
        remaining = self.catalogue.remove_replica(lfn, node_id)
        self.audit_event(session.node_id, "CATALOGO", "Réplica removida", f"{lfn} @ {node_id}", session.peer)
        return MessageKind.CAT_REMOVE, {"remaining": remaining}


class CatalogueService:
    """Processo do catálogo: log de réplicas, auditoria e servidor"""

    def __init__(self, config: CatalogueConfig, roster: Optional[Roster] = None) -> None:
        self.config = config
        os.makedirs(config.data_dir, exist_ok=True)
        install_file_log(os.path.join(config.data_dir, "catalogue.log"))
        self.roster = roster or Roster.from_file(config.roster_path)
        self.db = Database(os.path.join(config.data_dir, "catalogue.db"))
        self.db.init_audit_schema()
        self.audit = AuditLog(self.db)
        self.catalogue = FileCatalogue(config.log_path, fsync=config.fsync)
        self.server: Optional[CatalogueServer] = None

    @property
    def address(self) -> str:
        return self.server.address if self.server else self.config.listen_address

    def start(self) -> "CatalogueService":
        self.server = CatalogueServer(self.catalogue, self.config.listen_address, Auth(self.roster), self.audit)
        self.server.start()
        self.audit.registrar(SYSTEM_USER, "CATALOGO", "Catálogo iniciado", f"{len(self.catalogue)} LFNs")
        return self

    def stop(self) -> None:
        if self.server:
            self.server.stop()
            self.server = None
        self.catalogue.close()
