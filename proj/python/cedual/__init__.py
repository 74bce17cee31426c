"""Dual-view empathetic dialogue generation.

Transformer encoding with disentangled content/emotion views and two-stage
response decoding. The heavy lifting lives in the compiled extension; this
package re-exports its public surface.
"""

try:
    # Installed layout: the extension is built into the package directory.
    from ._cedual import *  # noqa: F401,F403
    from ._cedual import __doc__ as _ext_doc
except ImportError:
    # Development layout: the extension sits on PYTHONPATH next to the build tree.
    from _cedual import *  # noqa: F401,F403
    from _cedual import __doc__ as _ext_doc

__version__ = "0.1.0"
