"""
Hooks for filtering and setting job resources in the condiff ReFrame checks
"""
import shlex
import warnings

import reframe as rfm

from condiff.constants import *
from condiff.utils import log


def check_proc_attribute_defined(test: rfm.RegressionTest, attribute) -> bool:
    """
    Checks if a processor feature is defined (i.e. if test.current_partition.processor.<somefeature> is defined)
    If not, throws an informative error message.

    Return:
    - True (bool) if the attribute is defined
    - Function does not return (but raises AttributeError) if the attribute is undefined
    """
    if not test.current_partition:
        raise AttributeError('This function can only be called after the setup phase, when current_partition is known')
    if getattr(test.current_partition.processor, attribute):
        return True
    raise AttributeError(
        f"Processor information ({attribute}) missing. "
        "Check that processor information is either autodetected "
        "(see https://reframe-hpc.readthedocs.io/en/stable/configure.html#proc-autodetection), "
        "or manually set in the ReFrame configuration file "
        "(see https://reframe-hpc.readthedocs.io/en/stable/config_reference.html#processor-info)."
    )


def _set_or_append_valid_systems(test: rfm.RegressionTest, valid_systems: str):
    """
    Sets test.valid_systems based on the valid_systems argument.
    - An empty valid_systems string sets test.valid_systems to condiff.constants.INVALID_SYSTEM
    - An empty or invalid test.valid_systems is left as it is (test should not be run)
    - The default ['*'] is overwritten by [valid_systems]
    - A single-element test.valid_systems gets valid_systems appended, so several hooks can request features
    - Multiple elements (typically set on the command line) are left alone, with a warning
    """
    if valid_systems == '':
        test.valid_systems = [INVALID_SYSTEM]
        return

    if len(test.valid_systems) == 0 or test.valid_systems == [INVALID_SYSTEM]:
        return
    elif len(test.valid_systems) == 1 and test.valid_systems[0] == '*':
        test.valid_systems = [valid_systems]
    elif len(test.valid_systems) == 1:
        test.valid_systems[0] = f'{test.valid_systems[0]} {valid_systems}'
    else:
        warn_msg = f"valid_systems has multiple ({len(test.valid_systems)}) items,"
        warn_msg += " which is not supported by this hook."
        warn_msg += " Make sure to handle filtering yourself."
        warnings.warn(warn_msg)


def filter_valid_systems_by_device_type(test: rfm.RegressionTest, required_device_type: str):
    """
    Filter valid_systems by required device type ('cpu' or 'cuda'),
    unless valid_systems is specified with --setvar valid_systems=<comma-separated-list>.
    A CUDA run requires partitions with the FEATURES[GPU] feature, a CPU run the FEATURES[CPU] feature.
    """
    if required_device_type == DEVICE_TYPES[GPU]:
        valid_systems = f'+{FEATURES[GPU]}'
    elif required_device_type == DEVICE_TYPES[CPU]:
        valid_systems = f'+{FEATURES[CPU]}'
    else:
        valid_systems = ''

    _set_or_append_valid_systems(test, valid_systems)

    log(f'valid_systems set to {test.valid_systems}')


def check_custom_executable_opts(test: rfm.RegressionTest, num_default: int = 0):
    """"
    Check if custom executable options were added with --setvar executable_opts=<x>.
    """
    # normalize options
    test.executable_opts = shlex.split(' '.join(test.executable_opts))
    test.has_custom_executable_opts = False
    if len(test.executable_opts) > num_default:
        test.has_custom_executable_opts = True
    log(f'has_custom_executable_opts set to {test.has_custom_executable_opts}')


def set_single_task(test: rfm.RegressionTest):
    """
    condiff runs one command per process: request one task using all cores of a node,
    unless num_cpus_per_task was set with --setvar num_cpus_per_task=<x>.
    """
    test.num_tasks = 1
    test.num_tasks_per_node = 1
    if not test.num_cpus_per_task:
        check_proc_attribute_defined(test, 'num_cpus')
        test.num_cpus_per_task = test.current_partition.processor.num_cpus
    if test.device_type == DEVICE_TYPES[GPU]:
        test.num_gpus_per_node = 1
    log(f'num_cpus_per_task set to {test.num_cpus_per_task}')


def set_thread_count(test: rfm.RegressionTest):
    """
    Pin the torch and OpenMP thread pools to the cores given to the task.
    Passed as run.num_threads so the value also lands in the config snapshot of the run.
    """
    test.env_vars['OMP_NUM_THREADS'] = test.num_cpus_per_task
    log(f'Set environment variable OMP_NUM_THREADS to {test.env_vars["OMP_NUM_THREADS"]}')
    if not test.has_custom_executable_opts:
        test.executable_opts += [f'run.num_threads={test.num_cpus_per_task}']
        log(f'executable_opts set to {test.executable_opts}')
