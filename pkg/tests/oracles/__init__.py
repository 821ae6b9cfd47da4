"""Independent reference implementations used as test oracles.

Nothing here imports the package's compiled kernels; each oracle re-derives
its result from the written rules with plain Python or numpy.
"""
