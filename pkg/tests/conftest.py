"""
conftest.py - Fixtures compartilhadas para os testes
"""

import os
import sys

import pytest

# Garantir que o diretório raiz está no path
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from core.anonymizer import SiteKey
from core.catalogue import FileCatalogue
from core.metamodel import SchemaRegistry
from core.node import NodeService
from config import CONFIG
from tests.test_config import limpar_diretorio, novo_diretorio


def pytest_addoption(parser):
    """Adiciona opções de linha de comando para o pytest"""
    parser.addoption(
        "--runslow", action="store_true", default=False, help="run slow tests"
    )


def pytest_configure(config):
    """Configura marcadores personalizados"""
    config.addinivalue_line("markers", "slow: mark test as slow to run")


def pytest_collection_modifyitems(config, items):
    """Pula testes lentos por padrão, a menos que --runslow seja especificado"""
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="need --runslow option to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(scope="function")
def temp_dir():
    """Diretório temporário removido ao final do teste"""
    path = novo_diretorio()
    yield path
    limpar_diretorio(path)


@pytest.fixture(scope="function")
def registry():
    """Registro com os quatro esquemas de base, sem persistência"""
    reg = SchemaRegistry()
    reg.load_directory(CONFIG.schema_dir, persist=False)
    return reg


@pytest.fixture(scope="function")
def local_node(temp_dir):
    """Nó isolado com catálogo em arquivo (sem rede)"""
    catalogue = FileCatalogue(os.path.join(temp_dir, "catalogue.jsonl"), fsync=False)
    site_key = SiteKey.generate(os.path.join(temp_dir, "site.key"))
    service = NodeService.open("node-a", os.path.join(temp_dir, "node-a"), catalogue, site_key)
    yield service
    catalogue.close()
