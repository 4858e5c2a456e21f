"""
test_protocol.py - Testes do enquadramento do protocolo de fio
"""

import os
import random
import socket
import sys

import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from config import parse_address
from core.auth_service import Auth, AuthToken
from core.protocol import (
    HEADER, HEADER_SIZE, MAX_BODY_BYTES, BadSecret, Conflict, ConsentMissing, ErrorCode,
    GridError, IntegrityError, Malformed, MalformedBody, MessageKind, NotFound, OversizeBody,
    Truncated, Unauthorized, UnknownAlgorithm, UnknownKind, UnknownNode, canonical_json,
    decode_frame, decode_header, encode_frame, error_from_reply, recv_frame, send_frame,
)
from core.query import Comparison, SubQuery
from core.server import GridServer
from tests.test_config import SECRETS, make_roster, token_for


GOLDEN_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "golden")


def golden(name: str) -> bytes:
    with open(os.path.join(GOLDEN_DIR, f"{name}.hex"), "r", encoding="ascii") as f:
        return bytes.fromhex(f.read().strip())


TEXT_ALPHABET = "abcXYZ019 _/-:.çãé€\"\\\n\t"


def random_text(rng: random.Random) -> str:
    return "".join(rng.choice(TEXT_ALPHABET) for _ in range(rng.randint(0, 12)))


def random_value(rng: random.Random, depth: int = 0):
    choice = rng.randrange(7 if depth < 3 else 5)
    if choice == 0:
        return rng.randint(-2 ** 53, 2 ** 53)
    if choice == 1:
        return rng.uniform(-1e6, 1e6)
    if choice == 2:
        return random_text(rng)
    if choice == 3:
        return rng.random() < 0.5
    if choice == 4:
        return None
    if choice == 5:
        return [random_value(rng, depth + 1) for _ in range(rng.randint(0, 4))]
    return random_body(rng, depth + 1)


def random_body(rng: random.Random, depth: int = 0) -> dict:
    return {random_text(rng): random_value(rng, depth) for _ in range(rng.randint(0, 5))}


class TestFraming:
    """Codificação e decodificação de quadros"""

    def test_header_layout(self):
        """Cabeçalho: 4 bytes de tamanho big-endian e 1 byte de tipo"""
        frame = encode_frame(MessageKind.SUBQUERY, {"a": 1})
        assert HEADER_SIZE == 5
        assert frame[:4] == len(b'{"a":1}').to_bytes(4, "big")
        assert frame[4] == 0x20
        assert frame[5:] == b'{"a":1}'

    def test_message_kind_codes(self):
        assert MessageKind.AUTH == 0x01
        assert MessageKind.ERROR == 0x03
        assert MessageKind.CAT_REMOVE == 0x13
        assert MessageKind.FED_QUERY == 0x22
        assert MessageKind.FED_JOB == 0x33
        assert MessageKind.IMAGE_DATA == 0x41
        assert MessageKind.INGEST_OK == 0x51

    def test_canonical_body(self):
        """Chaves ordenadas, sem espaços e UTF-8 sem escapes"""
        assert canonical_json({"b": 1, "a": "é"}) == '{"a":"é","b":1}'
        frame = encode_frame(MessageKind.ERROR, {"detail": "é"})
        assert "é".encode("utf-8") in frame

    def test_decode_inverts_encode(self):
        body = {"lfn": "/node-a/x.smi", "n": [1, 2, 3]}
        frame = decode_frame(encode_frame(MessageKind.CAT_RESOLVE, body))
        assert frame.kind == MessageKind.CAT_RESOLVE
        assert frame.payload() == body

    def test_random_payloads_round_trip(self):
        rng = random.Random(2024)
        kinds = list(MessageKind)
        for _ in range(1000):
            kind = rng.choice(kinds)
            body = random_body(rng)
            encoded = encode_frame(kind, body)
            frame = decode_frame(encoded)
            assert frame.kind == kind
            assert frame.payload() == body
            assert frame.body == canonical_json(body)
            assert frame.wire_size == len(encoded)

    def test_decode_consumes_exact_length(self):
        """Bytes após o corpo pertencem ao próximo quadro"""
        first = encode_frame(MessageKind.AUTH_OK, {"x": 1})
        second = encode_frame(MessageKind.ERROR, {"code": 3, "detail": "NotFound: y"})
        frame = decode_frame(first + second)
        assert frame.wire_size == len(first)
        assert decode_frame((first + second)[frame.wire_size:]).payload()["code"] == 3

    def test_empty_body_is_empty_object(self):
        frame = decode_frame(encode_frame(MessageKind.AUTH_OK, ""))
        assert frame.body == ""
        assert frame.payload() == {}

    def test_truncated_header(self):
        with pytest.raises(Truncated):
            decode_header(b"\x00\x00\x01")

    def test_truncated_body(self):
        frame = encode_frame(MessageKind.SUBQUERY, {"kind": "image"})
        with pytest.raises(Truncated):
            decode_frame(frame[:-2])

    def test_unknown_kind(self):
        with pytest.raises(UnknownKind):
            decode_frame(HEADER.pack(2, 0x7F) + b"{}")
        with pytest.raises(UnknownKind):
            encode_frame(0x7F, {})

    def test_malformed_body(self):
        with pytest.raises(MalformedBody):
            decode_frame(HEADER.pack(3, 0x01) + b"{x}")
        with pytest.raises(MalformedBody):
            decode_frame(HEADER.pack(2, 0x01) + b"\xff\xfe")

    def test_oversize_declared_length(self):
        """Tamanho declarado acima do limite é rejeitado antes de ler o corpo"""
        with pytest.raises(OversizeBody):
            decode_header(HEADER.pack(MAX_BODY_BYTES + 1, 0x01))

    def test_limit_is_64_mib(self):
        assert MAX_BODY_BYTES == 64 * 1024 * 1024
        length, kind = decode_header(HEADER.pack(MAX_BODY_BYTES, 0x41))
        assert length == MAX_BODY_BYTES
        assert kind == MessageKind.IMAGE_DATA

    @pytest.mark.slow
    def test_oversize_body_on_encode(self):
        with pytest.raises(OversizeBody):
            encode_frame(MessageKind.IMAGE_DATA, "x" * (MAX_BODY_BYTES + 1))


class TestGoldenFrames:
    """Quadros de referência gravados byte a byte"""

    def test_auth_frame(self):
        token = AuthToken("node-a", token_for("node-a").secret_digest, "2024-01-01T00:00:00Z")
        assert encode_frame(MessageKind.AUTH, token.to_dict()) == golden("auth")

    def test_error_frame_with_accents(self):
        error = Malformed("referência inválida")
        assert encode_frame(MessageKind.ERROR, error.to_reply()) == golden("error")

    def test_cat_resolve_frame(self):
        lfn = "/node-a/patient-P-0123456789abcdef/study-ST-0001/img-L-CC.smi"
        assert encode_frame(MessageKind.CAT_RESOLVE, {"lfn": lfn}) == golden("cat_resolve")

    def test_subquery_frame(self):
        sub = SubQuery("node-b", "image", Comparison("view", "=", "CC"), ("lfn",))
        assert encode_frame(MessageKind.SUBQUERY, sub.to_dict()) == golden("subquery")

    def test_empty_frame(self):
        assert encode_frame(MessageKind.AUTH_OK, "") == golden("auth_ok_empty")

    def test_golden_frames_decode(self):
        for name in ("auth", "error", "cat_resolve", "subquery", "auth_ok_empty"):
            data = golden(name)
            frame = decode_frame(data)
            assert frame.wire_size == len(data)
            assert encode_frame(frame.kind, frame.payload() if frame.body else "") == data


class TestErrors:
    """Conjunto fechado de códigos e reconstrução a partir da resposta"""

    def test_error_codes(self):
        assert [int(c) for c in ErrorCode] == [1, 2, 3, 4, 5, 6, 7, 8]
        assert UnknownNode.code == ErrorCode.UNKNOWN_NODE
        assert BadSecret.code == ErrorCode.BAD_SECRET
        assert Conflict.code == ErrorCode.CONFLICT

    def test_specific_errors_map_to_closed_set(self):
        assert ConsentMissing("x").to_reply()["code"] == int(ErrorCode.MALFORMED)
        assert UnknownAlgorithm("x").to_reply()["code"] == int(ErrorCode.NOT_FOUND)
        assert IntegrityError("x").to_reply()["code"] == int(ErrorCode.CONFLICT)

    def test_reply_detail_carries_name(self):
        assert NotFound("sem réplica").to_reply() == {"code": 3, "detail": "NotFound: sem réplica"}

    def test_error_from_reply_restores_subclass(self):
        error = error_from_reply(ConsentMissing("estudo ST-1").to_reply())
        assert isinstance(error, ConsentMissing)
        assert error.detail == "estudo ST-1"

    def test_error_from_reply_falls_back_to_code(self):
        error = error_from_reply({"code": 6, "detail": "algo estranho"})
        assert type(error) is Unauthorized
        assert error.detail == "algo estranho"

    def test_error_from_reply_mismatched_name(self):
        """Nome que não bate com o código cai na classe do código"""
        error = error_from_reply({"code": 3, "detail": "Conflict: x"})
        assert type(error) is NotFound

    def test_unknown_code_is_internal(self):
        error = error_from_reply({"code": 99, "detail": "?"})
        assert isinstance(error, GridError)
        assert error.code == ErrorCode.INTERNAL


class TestHandshake:
    """Sessão autenticada sobre um servidor real"""

    @pytest.fixture(autouse=True)
    def setup_method(self):
        """Servidor com um único handler de eco"""
        self.server = GridServer("127.0.0.1:0", "teste", Auth(make_roster()))
        self.server.add(MessageKind.SUBQUERY, lambda session, body: (MessageKind.RESULTSET, {
            "node": session.node_id, "role": session.role, "echo": body,
        }))
        self.server.start()
        yield
        self.server.stop()

    def _connect(self) -> socket.socket:
        sock = socket.create_connection(parse_address(self.server.address), timeout=10)
        return sock

    def test_auth_then_request(self):
        with self._connect() as sock:
            send_frame(sock, MessageKind.AUTH, token_for("node-b").to_dict())
            reply = recv_frame(sock)
            assert reply.kind == MessageKind.AUTH_OK
            assert reply.payload()["node_id"] == "node-b"
            assert reply.payload()["role"] == "NODE"

            send_frame(sock, MessageKind.SUBQUERY, {"x": 1})
            reply = recv_frame(sock)
            assert reply.kind == MessageKind.RESULTSET
            assert reply.payload() == {"node": "node-b", "role": "NODE", "echo": {"x": 1}}

    def test_first_frame_must_be_auth(self):
        with self._connect() as sock:
            send_frame(sock, MessageKind.SUBQUERY, {"x": 1})
            reply = recv_frame(sock)
            assert reply.kind == MessageKind.ERROR
            assert reply.payload()["code"] == int(ErrorCode.UNAUTHORIZED)
            # conexão encerrada após a recusa
            assert recv_frame(sock) is None

    def test_bad_secret(self):
        with self._connect() as sock:
            send_frame(sock, MessageKind.AUTH, token_for("node-a", "errado").to_dict())
            reply = recv_frame(sock)
            assert reply.kind == MessageKind.ERROR
            assert isinstance(error_from_reply(reply.payload()), BadSecret)

    def test_unknown_node(self):
        with self._connect() as sock:
            send_frame(sock, MessageKind.AUTH, AuthToken.from_secret("intruso", "x").to_dict())
            reply = recv_frame(sock)
            assert isinstance(error_from_reply(reply.payload()), UnknownNode)

    @pytest.mark.parametrize("body", [b'["node-a"]', b'"node-a"', b"7", b"null"])
    def test_non_object_auth_body(self, body):
        with self._connect() as sock:
            sock.sendall(HEADER.pack(len(body), int(MessageKind.AUTH)) + body)
            reply = recv_frame(sock)
            assert reply.kind == MessageKind.ERROR
            assert isinstance(error_from_reply(reply.payload()), Malformed)
            assert recv_frame(sock) is None

    def test_unhandled_kind_keeps_session(self):
        """Tipo sem handler gera Malformed mas a sessão continua"""
        with self._connect() as sock:
            send_frame(sock, MessageKind.AUTH, token_for("clinico").to_dict())
            assert recv_frame(sock).kind == MessageKind.AUTH_OK
            send_frame(sock, MessageKind.FETCH_IMAGE, {"lfn": "/a/b"})
            reply = recv_frame(sock)
            assert reply.payload()["code"] == int(ErrorCode.MALFORMED)
            send_frame(sock, MessageKind.SUBQUERY, {})
            assert recv_frame(sock).payload()["role"] == "CLINICIAN"

    def test_malformed_body_closes_session(self):
        with self._connect() as sock:
            send_frame(sock, MessageKind.AUTH, token_for("node-a").to_dict())
            assert recv_frame(sock).kind == MessageKind.AUTH_OK
            sock.sendall(HEADER.pack(3, int(MessageKind.SUBQUERY)) + b"{x}")
            reply = recv_frame(sock)
            assert reply.kind == MessageKind.ERROR
            assert reply.payload()["code"] == int(ErrorCode.MALFORMED)
            assert recv_frame(sock) is None

    def test_secrets_never_on_wire(self):
        """O token carrega apenas o digest do segredo"""
        frame = encode_frame(MessageKind.AUTH, token_for("node-a").to_dict())
        assert SECRETS["node-a"].encode() not in frame
