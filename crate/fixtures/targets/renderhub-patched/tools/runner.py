import os
import shlex

CONVERTER = "convert-ckpt"


def run_converter(path):
    cmd = CONVERTER + " --input " + shlex.quote(path)
    return os.system(cmd)
