import torch


def read_checkpoint(path):
    return torch.load(path, map_location="cpu")
