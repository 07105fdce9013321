import pytest

from pscsim import registers as reg
from pscsim.controller import FleetEngine, PscController
from pscsim.link import Link
from pscsim.plant import DEFAULT_CLASSES
from pscsim.sim import Simulator


def make_rig(cls_name="corrector", seed=1, n_ps=1, state_dir=None, **overrides):
    """One-or-more PS test rig: simulator, fleet, controllers, links."""
    sim = Simulator(seed=seed)
    fleet = FleetEngine(sim)
    ps_class = DEFAULT_CLASSES[cls_name].with_overrides(**overrides) if overrides \
        else DEFAULT_CLASSES[cls_name]
    ctls = [PscController(sim, fleet, "PS%d" % (i + 1), ps_class,
                          state_dir=state_dir) for i in range(n_ps)]
    fleet.build()
    links = []
    for c in ctls:
        c.link = Link(sim, c.handle_frame, name=c.ps_id)
        links.append(c.link)
    fleet.start()
    if n_ps == 1:
        return sim, fleet, ctls[0], links[0]
    return sim, fleet, ctls, links


@pytest.fixture
def rig():
    return make_rig()


def turn_on(c, i_set=None):
    c.set_mode(reg.MODE_ON)
    if i_set is not None:
        assert c.reg_write(reg.I_SET, reg.f32_to_word(i_set), via_link=False) is None
