"""Finite-element simulator and verification harness for a microscopic
three-domain model of cardiac tissue with dynamic gap junctions.

Two intracellular potential fields and one extracellular field, each
quasi-static in its own region, coupled solely through capacitive-ionic
conditions on the sarcolemma and gap-junction interfaces. The package
builds the microstructured meshes, assembles the block operators, steps
the coupled system in time, and exposes every energy estimate, positivity
property, and stability bound of the underlying analysis as an executable
diagnostic.
"""

__version__ = "0.1.0"
