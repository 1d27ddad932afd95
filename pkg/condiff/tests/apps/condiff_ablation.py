"""
This module runs the conditioning ablation: the unconditioned baseline, concatenation and additive fusion
are trained on the same synthetic data under the same seeds, and additive conditioning must beat the baseline.
"""

import reframe as rfm
import reframe.utility.sanity as sn

from condiff import hooks, utils
from condiff.constants import *  # noqa


@rfm.simple_test
class CONDIFF_Ablation(rfm.RunOnlyRegressionTest):

    valid_prog_environs = ['default']
    valid_systems = ['*']

    device_type = parameter([DEVICE_TYPES[CPU], DEVICE_TYPES[GPU]])

    epochs = variable(int, value=30)
    # absolute mean Dice gap of additive conditioning over the unconditioned baseline
    min_gap = variable(float, value=0.05)

    executable = 'condiff'

    time_limit = '2h'

    @deferrable
    def assert_rows(self):
        '''Assert that the table has exactly one row per conditioning strategy'''
        rows = sn.extractall(r'^(?P<mode>none|concat|additive)\s+\S+\s+\S+$', self.stdout, 'mode')
        return sn.all([
            sn.assert_eq(sn.count(rows), len(ABLATION_ROWS)),
            *[sn.assert_found(rf'^{mode}\s+\S+\s+\S+$', self.stdout) for mode in ABLATION_ROWS],
        ])

    @deferrable
    def assert_additive_gap(self):
        '''Assert that additive conditioning improves on the unconditioned baseline'''
        gap = sn.extractsingle(r'^Additive minus unconditioned Dice: (?P<gap>\S+)', self.stdout, 'gap', float)
        return sn.assert_ge(gap, self.min_gap)

    @sanity_function
    def assert_sanity(self):
        '''Check all sanity criteria'''
        return sn.all([
            self.assert_rows(),
            self.assert_additive_gap(),
        ])

    def _row_value(self, mode, column):
        return sn.extractsingle(rf'^{mode}\s+(?P<dice>\S+)\s+(?P<miou>\S+)$', self.stdout, column, float)

    @performance_function('%')
    def dice_none(self):
        return self._row_value(FUSION_MODES[NONE], 'dice')

    @performance_function('%')
    def dice_concat(self):
        return self._row_value(FUSION_MODES[CONCAT], 'dice')

    @performance_function('%')
    def dice_additive(self):
        return self._row_value(FUSION_MODES[ADDITIVE], 'dice')

    @performance_function('%')
    def miou_additive(self):
        return self._row_value(FUSION_MODES[ADDITIVE], 'miou')

    @run_after('init')
    def run_after_init(self):
        """hooks to run after the init phase"""
        hooks.filter_valid_systems_by_device_type(self, required_device_type=self.device_type)

    @run_after('init')
    def set_executable_opts(self):
        hooks.check_custom_executable_opts(self, num_default=0)
        if not self.has_custom_executable_opts:
            self.executable_opts = ['ablate', '--data', DATA_SOURCES[SYNTHETIC], '--epochs', str(self.epochs),
                                    '--device', self.device_type, 'run.output_dir=output']
            utils.log(f'executable_opts set to {self.executable_opts}')

    @run_after('init')
    def set_test_descr(self):
        self.descr = f'condiff conditioning ablation on {self.device_type}'

    @run_after('setup')
    def run_after_setup(self):
        """hooks to run after the setup phase"""
        hooks.set_single_task(self)
        hooks.set_thread_count(self)
