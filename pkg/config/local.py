# ReFrame configuration file for running the condiff checks on a single machine, CPU only

from condiff.common_config import common_general_config, common_logging_config
from condiff.constants import *  # noqa: F403


site_configuration = {
    'systems': [
        {
            'name': 'local',
            'descr': 'Single machine, condiff checks on the CPU',
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
                    # the checks size their thread pools from num_cpus; autodetection fills in the rest
                    'processor': {
                        'num_cpus': 4,
                    },
                }
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
