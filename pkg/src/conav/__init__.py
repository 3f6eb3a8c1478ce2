"""conav: multi-agent instruction-following navigation on a grid world.

A master state machine coordinates planner, observer, controller and memory
roles; local and global reflection veto risky actions and distil failures
into a reusable experience bank.
"""

__version__ = "0.1.0"
