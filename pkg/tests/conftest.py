"""Shared builders for the small composite systems used across the suite."""

import numpy as np
import pytest

from edgesense.lattice import build_ssh
from edgesense.leads import RingLead, assemble_composite

MU_BIAS = np.pi / 40


def make_ssh_system(
    length=4,
    ring=8,
    mu=MU_BIAS,
    gamma=0.05,
    epsilon=0.2,
    gate=0.0,
    beta=np.inf,
    hop_lead=1.0,
):
    """SSH chain between two biased rings; defaults give N=20."""
    lat = build_ssh(length, 0.5, 1.0, gate)
    left = RingLead(size=ring, hop=hop_lead, mu=mu, beta=beta, gamma=gamma)
    right = RingLead(size=ring, hop=hop_lead, mu=-mu, beta=beta, gamma=gamma)
    return assemble_composite(lat, left, right, epsilon)


@pytest.fixture
def small_system():
    return make_ssh_system()
