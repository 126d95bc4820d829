import pathlib
from dataclasses import dataclass

import pytest

import switchboard
from switchboard.bus import MessageBroker
from switchboard.cache import LruCache
from switchboard.registry import ServiceDescriptor, ServiceRegistry
from switchboard.services import EchoService, ServiceHost

DATA_DIR = pathlib.Path(switchboard.__file__).parent / "data"


@pytest.fixture
def data_dir():
    return DATA_DIR


@pytest.fixture
def broker():
    b = MessageBroker()
    yield b
    b.close()


@dataclass
class Stack:
    broker: MessageBroker
    registry: ServiceRegistry
    host: ServiceHost
    cache: LruCache

    def add_echo(self, contract="Echo", service_id=None):
        descriptor = ServiceDescriptor(
            service_id=service_id or f"echo:{contract}", contract=contract
        )
        return self.host.register_and_start(descriptor, lambda: EchoService(descriptor))


@pytest.fixture
def stack():
    broker = MessageBroker()
    cache = LruCache(256)
    registry = ServiceRegistry(broker)
    host = ServiceHost(broker, registry, cache)
    s = Stack(broker, registry, host, cache)
    yield s
    broker.close()
