"""
server.py - Laço de atendimento autenticado comum ao catálogo e aos nós

Cada conexão é uma sessão: o primeiro quadro precisa ser AUTH; depois,
cada quadro é despachado pela tabela tipo -> handler.
"""

import logging
import socket
import socketserver
import threading
from typing import Any, Callable, Dict, Optional, Tuple

from config import CONFIG, parse_address
from .auth_service import AuditLog, Auth, AuthToken, Session
from .protocol import (
    GridError, InternalError, Malformed, MalformedBody, MessageKind, Oversize,
    Truncated, Unauthorized, UnknownKind, recv_frame, send_error, send_frame,
)


logger = logging.getLogger(__name__)

Handler = Callable[[Session, Dict[str, Any]], Tuple[MessageKind, Any]]

# erros de enquadramento encerram a conexão
_FRAMING_ERRORS = (Truncated, UnknownKind, MalformedBody, Oversize)


class _SessionHandler(socketserver.BaseRequestHandler):
    server: "GridServer"

    def handle(self) -> None:
        sock: socket.socket = self.request
        sock.settimeout(self.server.socket_timeout)
        peer = f"{self.client_address[0]}:{self.client_address[1]}"
        try:
            session = self._authenticate(sock, peer)
            if session is None:
                return
            self._serve(sock, session)
        except OSError as e:
            logger.debug(f"Conexão com {peer} encerrada: {e}")

    def _authenticate(self, sock: socket.socket, peer: str) -> Optional[Session]:
        try:
            frame = recv_frame(sock)
        except _FRAMING_ERRORS as e:
            send_error(sock, e)
            return None
        if frame is None:
            return None
        if frame.kind != MessageKind.AUTH:
            error = Unauthorized(f"primeiro quadro deve ser AUTH, recebido {frame.kind.name}")
            self.server.audit_event("-", "AUTH", "Quadro antes da autenticação", frame.kind.name, peer)
            send_error(sock, error)
            return None
        try:
            token = AuthToken.from_dict(frame.payload())
            session = self.server.auth.authenticate(token, peer)
        except GridError as e:
            node = frame.payload().get("node_id", "?") if isinstance(frame.payload(), dict) else "?"
            self.server.audit_event(str(node), "AUTH", "Falha de autenticação", e.name, peer)
            logger.warning(f"Autenticação recusada para {node} ({peer}): {e.name}")
            send_error(sock, e)
            return None
        send_frame(sock, MessageKind.AUTH_OK, {
            "node_id": session.node_id,
            "role": session.role,
            "server": self.server.server_id,
        })
        return session

    def _serve(self, sock: socket.socket, session: Session) -> None:
        while True:
            try:
                frame = recv_frame(sock)
            except _FRAMING_ERRORS as e:
                try:
                    send_error(sock, e)
                except OSError:
                    pass
                return
            if frame is None:
                return
            handler = self.server.handlers.get(frame.kind)
            try:
                if handler is None:
                    raise Malformed(f"{self.server.server_id} não atende {frame.kind.name}")
                payload = frame.payload()
                if not isinstance(payload, dict):
                    raise Malformed("corpo deve ser um objeto JSON")
                kind, body = handler(session, payload)
                send_frame(sock, kind, body)
            except GridError as e:
                send_error(sock, e)
            except OSError:
                raise
            except Exception:
                logger.exception(f"Erro interno atendendo {frame.kind.name} de {session.node_id}")
                send_error(sock, InternalError("erro interno"))


class GridServer(socketserver.ThreadingTCPServer):
    """Servidor TCP multi-thread com sessões autenticadas"""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, listen_address: str, server_id: str, auth: Auth,
                 audit: Optional[AuditLog] = None, socket_timeout: float = CONFIG.socket_timeout) -> None:
        super().__init__(parse_address(listen_address), _SessionHandler)
        self.server_id = server_id
        self.auth = auth
        self.audit = audit
        self.socket_timeout = socket_timeout
        self.handlers: Dict[MessageKind, Handler] = {}
        self._thread: Optional[threading.Thread] = None

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def add(self, kind: MessageKind, handler: Handler) -> None:
        self.handlers[kind] = handler

    def audit_event(self, usuario: str, modulo: str, acao: str, detalhes: str = "", peer: str = "-") -> None:
        if self.audit is None:
            return
        try:
            self.audit.registrar(usuario, modulo, acao, detalhes, peer)
        except Exception as e:
            logger.error(f"Falha ao gravar auditoria: {e}")

    def start(self) -> "GridServer":
        self._thread = threading.Thread(target=self.serve_forever, name=f"server-{self.server_id}", daemon=True)
        self._thread.start()
        logger.info(f"{self.server_id} atendendo em {self.address}")
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()
        if self._thread:
            self._thread.join(timeout=5)
        logger.info(f"{self.server_id} encerrado")
