# SPDX-License-Identifier: MIT

'''
Trace-driven simulator and algorithm library for a crowdsourced dynamic map
in automotive edge computing networks.
'''

__version__ = '0.1.0'


class LiveMapError(Exception):
    '''Base class of every error raised by this package.'''
