"""
This module runs the lightweight profiling protocol: trainable parameters, reserved and typical memory,
training time per step and inference time per image.
"""

import reframe as rfm
import reframe.utility.sanity as sn

from condiff import hooks, utils
from condiff.constants import *  # noqa


@rfm.simple_test
class CONDIFF_Profiling(rfm.RunOnlyRegressionTest):

    valid_prog_environs = ['default']
    valid_systems = ['*']

    # Parameterize over the known profiling scales
    scale = parameter(PROFILE_SCALES.keys())

    device_type = parameter([DEVICE_TYPES[CPU], DEVICE_TYPES[GPU]])

    executable = 'condiff'

    time_limit = '20m'

    def _value(self, key):
        return sn.extractsingle(rf'^{key}: (?P<value>\S+)$', self.stdout, 'value')

    @deferrable
    def assert_report(self):
        '''Assert that every quantity of the efficiency table is reported'''
        return sn.all([sn.assert_found(rf'^{key}: \S+$', self.stdout) for key, _ in PROFILE_COLUMNS])

    @deferrable
    def assert_no_errors(self):
        '''Assert that the run did not end with an out-of-memory entry'''
        return sn.assert_not_found(r'^error: ', self.stdout)

    @deferrable
    def assert_memory_readings(self):
        '''Reserved memory bounds typical memory whenever both readings are available'''
        reserved = self._value('reserved_memory_mb')
        typical = self._value('typical_memory_mb')
        if self.device_type == DEVICE_TYPES[GPU]:
            return sn.assert_ge(sn.defer(float)(reserved), sn.defer(float)(typical))
        return sn.assert_eq(reserved, UNAVAILABLE)

    @sanity_function
    def assert_sanity(self):
        '''Check all sanity criteria'''
        return sn.all([
            self.assert_report(),
            self.assert_no_errors(),
            self.assert_memory_readings(),
        ])

    @performance_function('M')
    def params(self):
        return sn.extractsingle(r'^trainable_params: (?P<value>\S+)$', self.stdout, 'value', float) / 1e6

    @performance_function('MB')
    def typical_memory(self):
        return sn.extractsingle(r'^typical_memory_mb: (?P<value>\S+)$', self.stdout, 'value', float)

    @performance_function('ms')
    def train_time(self):
        return sn.extractsingle(r'^train_ms_per_step: (?P<value>\S+)$', self.stdout, 'value', float)

    @performance_function('ms')
    def inference_time(self):
        return sn.extractsingle(r'^infer_ms_per_image: (?P<value>\S+)$', self.stdout, 'value', float)

    @run_after('init')
    def run_after_init(self):
        """hooks to run after the init phase"""
        hooks.filter_valid_systems_by_device_type(self, required_device_type=self.device_type)

    @run_after('init')
    def set_tag_ci(self):
        """Only the desk scale on a CPU fits the CI budget"""
        if self.scale == 'desk' and self.device_type == DEVICE_TYPES[CPU]:
            self.tags.add(TAGS[CI])
        self.tags.add(self.scale)
        utils.log(f'tags set to {self.tags}')

    @run_after('init')
    def set_executable_opts(self):
        hooks.check_custom_executable_opts(self, num_default=0)
        if not self.has_custom_executable_opts:
            self.executable_opts = ['profile', '--scale', self.scale, '--device', self.device_type,
                                    'run.output_dir=output']
            utils.log(f'executable_opts set to {self.executable_opts}')

    @run_after('init')
    def set_test_descr(self):
        self.descr = f'condiff profiling at the {self.scale} scale on {self.device_type}'

    @run_after('setup')
    def run_after_setup(self):
        """hooks to run after the setup phase"""
        hooks.set_single_task(self)
        hooks.set_thread_count(self)
