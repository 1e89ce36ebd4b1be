"""Sparse-grid collocation for elliptic problems on randomly deformed domains.

Modules
-------
domain_map
    Random domain map, its Jacobian and the remapped coefficient.
fem
    P1 finite elements on the reference square, QoI and adjoint.
sparse_grid
    Smolyak interpolation and quadrature on Clenshaw-Curtis nodes.
pipeline
    Collocation estimates of QoI statistics and the error studies.
analyticity
    Analyticity-region constants, rate exponents and the work model.
cli
    Command-line runner.
"""

__version__ = "0.1.0"
