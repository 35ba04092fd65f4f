#!/usr/bin/env python3


def get_debug_info() -> dict:
    import os.path
    import sys

    import cv2
    import numpy as np
    import psutil
    import torch

    from matchkit.utils import THREADS_ENV_VAR, get_device, get_hardware_description, worker_count
    from matchkit.version import get_version

    data = {
        "matchkit_version": get_version(),
        "matchkit_path": os.path.dirname(__file__),
        "python_version": sys.version,
        "python_installation_path": sys.executable,
        "device": get_device(),
        "torch_version": torch.__version__,
        "numpy_version": np.__version__,
        "opencv_version": cv2.__version__,
        "hardware": get_hardware_description(get_device()),
        "cpu_count": psutil.cpu_count(logical=True),
        "worker_threads": worker_count(),
        "threads_env": os.environ.get(THREADS_ENV_VAR, ""),
    }
    return data
