# ReFrame configuration file for a workstation with one CUDA GPU.
# The condiff checks run once per partition: the CPU variants on 'cpu', the CUDA variants on 'gpu'.

from condiff.common_config import common_general_config, common_logging_config
from condiff.constants import *  # noqa: F403

# Adapt to the machine
NUM_CPUS = 8

site_configuration = {
    'systems': [
        {
            'name': 'workstation',
            'descr': 'Workstation with one CUDA GPU',
            'hostnames': ['.*'],
            'modules_system': 'nomod',
            'partitions': [
                {
                    'name': 'cpu',
                    'scheduler': 'local',
                    'launcher': 'local',
                    'environs': ['default'],
                    'features': [FEATURES[CPU]],
                    'max_jobs': 1,
                    'processor': {
                        'num_cpus': NUM_CPUS,
                    },
                },
                {
                    'name': 'gpu',
                    'scheduler': 'local',
                    'launcher': 'local',
                    'environs': ['default'],
                    'features': [FEATURES[GPU]],
                    # one job at a time on the device
                    'max_jobs': 1,
                    'processor': {
                        'num_cpus': NUM_CPUS,
                    },
                    'devices': [
                        {
                            'type': DEVICE_TYPES[GPU],
                            'num_devices': 1,
                        }
                    ],
                },
            ]
        }
    ],
    'environments': [
        {
            'name': 'default',
            'cc': 'cc',
            'cxx': '',
            'ftn': ''
        }
    ],
    'general': [
        {
            'purge_environment': False,
            'remote_detect': False,
            **common_general_config(),
        }
    ],
    'logging': common_logging_config(),
}
