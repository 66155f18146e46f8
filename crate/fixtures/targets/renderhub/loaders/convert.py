from tools.runner import run_converter


def convert_checkpoint(path):
    code = run_converter(path)
    return "ok" if code == 0 else "failed"
