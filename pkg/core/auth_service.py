"""
auth_service.py - Roster da federação, autenticação por token e auditoria
"""

import json
import threading
from dataclasses import dataclass, field
from datetime import datetime
from typing import Any, Dict, List, Optional

from .protocol import BadSecret, Malformed, Unauthorized, UnknownNode
from .security import Formatters, Security


ROLES = ("ADMIN", "NODE", "CLINICIAN")


class AuditLog:
    def __init__(self, db: "Database") -> None:
        self.db = db

    def registrar(self, usuario: str, modulo: str, acao: str, detalhes: str = "", ip_address: str = None) -> None:
        """
        Registra uma ação no log de auditoria

        Args:
            usuario: node_id da sessão
            modulo: Módulo do sistema (CATALOGO, INGESTAO, JOBS...)
            acao: Ação realizada
            detalhes: Detalhes adicionais (nunca identificadores de paciente)
            ip_address: Endereço do par
        """
        agora = datetime.now().strftime("%Y-%m-%d %H:%M:%S")
        self.db.execute(
            """
            INSERT INTO logs (data_hora, usuario, modulo, acao, detalhes, ip_address)
            VALUES (?, ?, ?, ?, ?, ?)
            """,
            (agora, usuario, modulo, acao, detalhes, ip_address or "-"),
        )

    def listar(self, limit: int = 100):
        return self.db.read_sql(
            "SELECT data_hora, usuario, modulo, acao, detalhes, ip_address FROM logs ORDER BY id DESC LIMIT ?",
            (limit,),
        )


@dataclass(frozen=True)
class AuthToken:
    node_id: str
    secret_digest: str
    issued_at: str = field(default_factory=Formatters.utc_now_iso)

    @classmethod
    def from_secret(cls, node_id: str, secret: str) -> "AuthToken":
        return cls(node_id=node_id, secret_digest=Security.sha256_hex(secret))

    @classmethod
    def from_file(cls, path: str) -> "AuthToken":
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
        return cls.from_secret(data["node_id"], data["secret"])

    def to_dict(self) -> Dict[str, str]:
        return {"node_id": self.node_id, "secret_digest": self.secret_digest, "issued_at": self.issued_at}

    @classmethod
    def from_dict(cls, data: Any) -> "AuthToken":
        if not isinstance(data, dict):
            raise Malformed(f"corpo AUTH deve ser um objeto, recebido {type(data).__name__}")
        try:
            token = cls(str(data["node_id"]), str(data["secret_digest"]), str(data.get("issued_at", "")))
        except (KeyError, TypeError):
            raise Malformed("corpo AUTH requer node_id e secret_digest")
        if not Security.is_checksum(token.secret_digest):
            raise Malformed("secret_digest deve ter 64 caracteres hexadecimais")
        return token


@dataclass(frozen=True)
class RosterEntry:
    node_id: str
    role: str
    secret_sha256: str
    address: Optional[str] = None


class Roster:
    """Membros da federação. Endereços podem ser atualizados em tempo de execução."""

    def __init__(self, entries: List[RosterEntry]) -> None:
        self._lock = threading.Lock()
        self._entries: Dict[str, RosterEntry] = {}
        for entry in entries:
            if entry.role not in ROLES:
                raise ValueError(f"Papel inválido para {entry.node_id}: {entry.role}")
            self._entries[entry.node_id] = entry

    @classmethod
    def from_file(cls, path: str) -> "Roster":
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
        return cls([RosterEntry(**item) for item in data.get("nodes", [])])

    def save(self, path: str) -> None:
        with self._lock:
            nodes = [vars(e) for e in sorted(self._entries.values(), key=lambda e: e.node_id)]
        with open(path, "w", encoding="utf-8") as f:
            json.dump({"nodes": nodes}, f, indent=2, sort_keys=True)

    def get(self, node_id: str) -> Optional[RosterEntry]:
        with self._lock:
            return self._entries.get(node_id)

    def set_address(self, node_id: str, address: str) -> None:
        with self._lock:
            entry = self._entries[node_id]
            self._entries[node_id] = RosterEntry(entry.node_id, entry.role, entry.secret_sha256, address)

    def live_nodes(self) -> Dict[str, str]:
        """node_id -> endereço dos grid-boxes (papel NODE com endereço)"""
        with self._lock:
            return {
                e.node_id: e.address
                for e in sorted(self._entries.values(), key=lambda e: e.node_id)
                if e.role == "NODE" and e.address
            }


@dataclass(frozen=True)
class Session:
    node_id: str
    role: str
    peer: str = "-"


class Auth:
    def __init__(self, roster: Roster) -> None:
        self.roster = roster

    def authenticate(self, token: AuthToken, peer: str = "-") -> Session:
        """
        Autentica um token contra o roster.

        Raises:
            UnknownNode: node_id fora do roster
            BadSecret: digest não confere
        """
        entry = self.roster.get(token.node_id)
        if entry is None:
            raise UnknownNode(f"nó não registrado: {token.node_id}")
        if not Security.digests_match(entry.secret_sha256, token.secret_digest):
            raise BadSecret(f"segredo inválido para {token.node_id}")
        return Session(node_id=entry.node_id, role=entry.role, peer=peer)

    @staticmethod
    def verificar_permissoes(user_level: str, needed_level: str) -> bool:
        if user_level == "ADMIN":
            return True
        if user_level == "NODE":
            return needed_level in ("NODE", "CLINICIAN")
        if user_level == "CLINICIAN":
            return needed_level == "CLINICIAN"
        return False

    @staticmethod
    def exigir(session: Session, needed_level: str) -> None:
        if not Auth.verificar_permissoes(session.role, needed_level):
            raise Unauthorized(f"{session.node_id} ({session.role}) sem permissão {needed_level}")
