import os

from loaders.checkpoint import read_checkpoint

ADAPTER_ROOT = "adapters"


def resolve_adapter_path(name):
    return os.path.join(ADAPTER_ROOT, name)


def load_adapter(name):
    path = resolve_adapter_path(name)
    state = read_checkpoint(path)
    return len(state)
