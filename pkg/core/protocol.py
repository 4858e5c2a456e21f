"""
protocol.py - Protocolo de fio v1 (quadros com prefixo de tamanho)

Cabeçalho de 5 bytes: tamanho (uint32 big-endian) + tipo (uint8),
seguido do corpo JSON UTF-8 com exatamente `tamanho` bytes.
"""

import json
import socket
import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Any, Dict, Optional, Type, Union

from config import CONFIG


HEADER = struct.Struct(">IB")
HEADER_SIZE = HEADER.size
MAX_BODY_BYTES = CONFIG.max_frame_bytes

assert HEADER_SIZE == 5


class MessageKind(IntEnum):
    AUTH = 0x01
    AUTH_OK = 0x02
    ERROR = 0x03
    CAT_REGISTER = 0x10
    CAT_RESOLVE = 0x11
    CAT_LIST = 0x12
    CAT_REMOVE = 0x13
    SUBQUERY = 0x20
    RESULTSET = 0x21
    FED_QUERY = 0x22
    JOB_SUBMIT = 0x30
    JOB_STATUS = 0x31
    JOB_RESULT = 0x32
    FED_JOB = 0x33
    FETCH_IMAGE = 0x40
    IMAGE_DATA = 0x41
    INGEST = 0x50
    INGEST_OK = 0x51


class ErrorCode(IntEnum):
    UNKNOWN_NODE = 1
    BAD_SECRET = 2
    NOT_FOUND = 3
    MALFORMED = 4
    OVERSIZE = 5
    UNAUTHORIZED = 6
    INTERNAL = 7
    CONFLICT = 8


class GridError(Exception):
    """Erro de domínio com código do conjunto fechado do protocolo"""

    code = ErrorCode.INTERNAL

    def __init__(self, detail: str = "") -> None:
        super().__init__(detail)
        self.detail = detail

    @property
    def name(self) -> str:
        return type(self).__name__

    def to_reply(self) -> Dict[str, Any]:
        return {"code": int(self.code), "detail": f"{self.name}: {self.detail}"}


class UnknownNode(GridError):
    code = ErrorCode.UNKNOWN_NODE


class BadSecret(GridError):
    code = ErrorCode.BAD_SECRET


class NotFound(GridError):
    code = ErrorCode.NOT_FOUND


class Malformed(GridError):
    code = ErrorCode.MALFORMED


class Oversize(GridError):
    code = ErrorCode.OVERSIZE


class Unauthorized(GridError):
    code = ErrorCode.UNAUTHORIZED


class InternalError(GridError):
    code = ErrorCode.INTERNAL


class Conflict(GridError):
    code = ErrorCode.CONFLICT


# Erros de operação mapeados sobre o conjunto fechado
class OversizeBody(Oversize):
    pass


class Truncated(Malformed):
    pass


class UnknownKind(Malformed):
    pass


class MalformedBody(Malformed):
    pass


class ConsentMissing(Malformed):
    pass


class QuerySyntaxError(Malformed):
    """Erro de sintaxe na consulta; position é o índice 1-based do token"""

    def __init__(self, detail: str = "", position: int = 0) -> None:
        super().__init__(detail)
        self.position = position


class Degenerate(Malformed):
    pass


class EmptyFederation(Malformed):
    pass


class UnknownAlgorithm(NotFound):
    pass


class IntegrityError(Conflict):
    pass


_ERRORS_BY_NAME: Dict[str, Type[GridError]] = {
    cls.__name__: cls
    for cls in (
        UnknownNode, BadSecret, NotFound, Malformed, Oversize, Unauthorized,
        InternalError, Conflict, OversizeBody, Truncated, UnknownKind,
        MalformedBody, ConsentMissing, QuerySyntaxError, Degenerate, EmptyFederation,
        UnknownAlgorithm, IntegrityError,
    )
}
_ERRORS_BY_CODE: Dict[int, Type[GridError]] = {
    int(ErrorCode.UNKNOWN_NODE): UnknownNode,
    int(ErrorCode.BAD_SECRET): BadSecret,
    int(ErrorCode.NOT_FOUND): NotFound,
    int(ErrorCode.MALFORMED): Malformed,
    int(ErrorCode.OVERSIZE): Oversize,
    int(ErrorCode.UNAUTHORIZED): Unauthorized,
    int(ErrorCode.INTERNAL): InternalError,
    int(ErrorCode.CONFLICT): Conflict,
}


def error_from_reply(payload: Dict[str, Any]) -> GridError:
    """Reconstrói a exceção mais específica a partir de um ErrorReply"""
    code = payload.get("code")
    detail = str(payload.get("detail", ""))
    name, sep, text = detail.partition(": ")
    cls = _ERRORS_BY_NAME.get(name) if sep else None
    if cls is None or int(cls.code) != code:
        cls = _ERRORS_BY_CODE.get(code, InternalError)
        text = detail
    return cls(text)


def canonical_json(payload: Any) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


@dataclass(frozen=True)
class Frame:
    kind: MessageKind
    body: str

    @property
    def wire_size(self) -> int:
        return HEADER_SIZE + len(self.body.encode("utf-8"))

    def payload(self) -> Any:
        if not self.body:
            return {}
        return json.loads(self.body)


def encode_frame(kind: Union[MessageKind, int], body: Union[str, Dict[str, Any], list]) -> bytes:
    """
    Codifica um quadro: 4 bytes de tamanho, 1 byte de tipo e o corpo.

    Raises:
        OversizeBody: corpo acima do limite de 64 MiB
        UnknownKind: tipo não registrado
    """
    try:
        kind = MessageKind(kind)
    except ValueError:
        raise UnknownKind(f"tipo de mensagem não registrado: 0x{int(kind):02X}")
    text = body if isinstance(body, str) else canonical_json(body)
    data = text.encode("utf-8")
    if len(data) > MAX_BODY_BYTES:
        raise OversizeBody(f"corpo com {len(data)} bytes excede {MAX_BODY_BYTES}")
    return HEADER.pack(len(data), int(kind)) + data


def decode_header(header: bytes) -> tuple:
    if len(header) < HEADER_SIZE:
        raise Truncated(f"cabeçalho com {len(header)} bytes, esperado {HEADER_SIZE}")
    length, kind_code = HEADER.unpack_from(header)
    if length > MAX_BODY_BYTES:
        raise OversizeBody(f"quadro declara {length} bytes, limite {MAX_BODY_BYTES}")
    try:
        kind = MessageKind(kind_code)
    except ValueError:
        raise UnknownKind(f"tipo de mensagem não registrado: 0x{kind_code:02X}")
    return length, kind


def decode_frame(data: bytes) -> Frame:
    """
    Decodifica um quadro. Consome exatamente 5 + tamanho bytes; bytes
    excedentes pertencem ao próximo quadro (ver Frame.wire_size).
    """
    length, kind = decode_header(data[:HEADER_SIZE])
    raw = data[HEADER_SIZE:HEADER_SIZE + length]
    if len(raw) < length:
        raise Truncated(f"declarados {length} bytes, recebidos {len(raw)}")
    try:
        body = bytes(raw).decode("utf-8")
        if body:
            json.loads(body)
    except (UnicodeDecodeError, ValueError) as e:
        raise MalformedBody(f"corpo não é JSON UTF-8 válido: {e}")
    return Frame(kind, body)


def _recv_exact(sock: socket.socket, size: int) -> bytes:
    chunks = []
    remaining = size
    while remaining > 0:
        fragment = sock.recv(min(remaining, 1 << 20))
        if not fragment:
            raise Truncated(f"conexão encerrada faltando {remaining} bytes")
        chunks.append(fragment)
        remaining -= len(fragment)
    return b"".join(chunks)


def send_frame(sock: socket.socket, kind: MessageKind, body: Union[str, Dict[str, Any], list]) -> None:
    sock.sendall(encode_frame(kind, body))


def recv_frame(sock: socket.socket) -> Optional[Frame]:
    """Lê um quadro completo do socket; None se a conexão fechou entre quadros."""
    first = sock.recv(HEADER_SIZE)
    if not first:
        return None
    header = first if len(first) == HEADER_SIZE else first + _recv_exact(sock, HEADER_SIZE - len(first))
    length, _ = decode_header(header)
    return decode_frame(header + _recv_exact(sock, length))


def send_error(sock: socket.socket, error: GridError) -> None:
    send_frame(sock, MessageKind.ERROR, error.to_reply())
