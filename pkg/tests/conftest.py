import pytest

from mesres.model.network import (
    Bus,
    CouplingPoint,
    CPKind,
    ElectricDemand,
    ElectricityNetwork,
    GasDemand,
    GasNetwork,
    GasPipe,
    Generator,
    HeatDemand,
    HeatNetwork,
    HeatProducer,
    Line,
    MultiEnergyNetwork,
    WaterPipe,
    GasSource,
)
from mesres.synth import SynthConfig, generate_mes, rural_mv_grid


def toy_mes(line_rating_ka=0.02, gas_d=0.065, with_units=False):
    """3 buses, 3 gas junctions, 3 heat junctions; optionally a generator, sources and a CHP."""
    el = ElectricityNetwork(
        buses=(Bus(0), Bus(1, x=1.0), Bus(2, x=1.0, y=1.0)),
        lines=(
            Line("a", 0, 1, 2.0, 0.4, line_rating_ka),
            Line("b", 1, 2, 2.0, 0.4, line_rating_ka),
            Line("c", 0, 2, 2.5, 0.4, line_rating_ka),
        ),
        slack_bus=0,
        generators=(Generator("g", 2, 0.1),) if with_units else (),
        demands=(ElectricDemand("d1", 1, 0.5, 0.1), ElectricDemand("d2", 2, 0.4, 0.1)),
    )
    gas = GasNetwork(
        junctions=(0, 1, 2),
        pipes=(GasPipe("a", 0, 1, 3000, gas_d), GasPipe("b", 1, 2, 3000, gas_d), GasPipe("c", 0, 2, 4000, gas_d)),
        slack_junction=0,
        demands=(GasDemand("d1", 1, 0.02), GasDemand("d2", 2, 0.03)),
        sources=(GasSource("s", 2, 0.005),) if with_units else (),
    )
    heat = HeatNetwork(
        junctions=(0, 1, 2),
        pipes=(WaterPipe("a", 0, 1, 2000, 0.1), WaterPipe("b", 1, 2, 2000, 0.08)),
        slack_junction=0,
        demands=(HeatDemand("d1", 1, 0.3), HeatDemand("d2", 2, 0.2)),
        producers=(HeatProducer("p", 1, 0.03),) if with_units else (),
    )
    cps = ()
    if with_units:
        cps = (
            CouplingPoint("chp", CPKind.CHP, 0.01, el_bus=1, gas_junction=1, heat_junction=2, eta_el=0.3, eta_heat=0.55, dispatch=0.001),
        )
    return MultiEnergyNetwork(el, gas, heat, cps).validate()


@pytest.fixture
def toy():
    return toy_mes()


@pytest.fixture
def toy_units():
    return toy_mes(with_units=True)


_MES = {}


def case_mes(density):
    """Generated MES on the built-in base grid (cached per density)."""
    if density not in _MES:
        _MES[density] = generate_mes(rural_mv_grid(), SynthConfig(seed=0).with_density(density))
    return _MES[density]


@pytest.fixture(scope="session")
def mes1():
    return case_mes(1.0)


@pytest.fixture(scope="session")
def mes0():
    return case_mes(0.0)
