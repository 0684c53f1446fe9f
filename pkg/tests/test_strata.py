import pytest

from mpes.strata import (
    ConfigurationError,
    ModelStructure,
    Region,
    RiskGroup,
    Stratum,
)


def two_region_structure():
    return ModelStructure(
        regions=[
            Region("A", pop_male=1000, pop_female=1100),
            Region("B", pop_male=2000, pop_female=2200),
        ],
        groups=[
            RiskGroup("msm", genders=("m",), rank=1),
            RiskGroup("idu", genders=("m", "f"), rank=2),
            RiskGroup("gp", genders=("m", "f"), rank=3),
        ],
        reference_group="gp",
    )


def test_stratum_enumeration_order():
    st = two_region_structure()
    # region-major, male before female, rank order within gender
    assert [str(s) for s in st.strata] == [
        "A:msm:m", "A:idu:m", "A:gp:m", "A:idu:f", "A:gp:f",
        "B:msm:m", "B:idu:m", "B:gp:m", "B:idu:f", "B:gp:f",
    ]
    assert st.n_strata == 10


def test_stratum_index_roundtrip():
    st = two_region_structure()
    for i, s in enumerate(st.strata):
        assert st.stratum_index(s.region, s.group, s.gender) == i
    assert st.has_stratum("A", "msm", "m")
    assert not st.has_stratum("A", "msm", "f")


def test_missing_stratum_raises():
    st = two_region_structure()
    with pytest.raises(ConfigurationError, match="msm:f"):
        st.stratum_index("A", "msm", "f")
    with pytest.raises(ConfigurationError):
        st.region("Z")
    with pytest.raises(ConfigurationError):
        st.group("nope")


def test_simplex_blocks_reference_last():
    st = two_region_structure()
    blocks = st.simplex_blocks()
    assert len(blocks) == 4  # 2 regions x 2 genders
    for region, gender, idxs in blocks:
        groups = [st.strata[i].group for i in idxs]
        assert groups[-1] == "gp"
        assert all(st.strata[i].region == region for i in idxs)
        assert all(st.strata[i].gender == gender for i in idxs)
    male_a = st.simplex_block("A", "m")
    assert [st.strata[i].group for i in male_a] == ["msm", "idu", "gp"]


def test_groups_sorted_by_rank_regardless_of_input_order():
    st = ModelStructure(
        regions=[Region("A", 10, 10)],
        groups=[
            RiskGroup("gp", genders=("m", "f"), rank=9),
            RiskGroup("msm", genders=("m",), rank=1),
        ],
        reference_group="gp",
    )
    assert [g.id for g in st.groups] == ["msm", "gp"]


def test_population_lookup():
    st = two_region_structure()
    assert st.population("A", "m") == 1000
    assert st.population("B", "f") == 2200


def test_two_gender_groups():
    st = two_region_structure()
    assert [g.id for g in st.two_gender_groups()] == ["idu", "gp"]


def test_strata_of_region():
    st = two_region_structure()
    idxs = st.strata_of_region("B", "f")
    assert [str(st.strata[i]) for i in idxs] == ["B:idu:f", "B:gp:f"]
    assert len(st.strata_of_region("A")) == 5


def test_duplicate_ids_rejected():
    with pytest.raises(ConfigurationError, match="duplicate region"):
        ModelStructure(
            regions=[Region("A", 10, 10), Region("A", 20, 20)],
            groups=[RiskGroup("gp", genders=("m", "f"))],
            reference_group="gp",
        )
    with pytest.raises(ConfigurationError, match="duplicate group"):
        ModelStructure(
            regions=[Region("A", 10, 10)],
            groups=[
                RiskGroup("gp", genders=("m", "f")),
                RiskGroup("gp", genders=("m",)),
            ],
            reference_group="gp",
        )


def test_reference_group_must_cover_all_genders():
    with pytest.raises(ConfigurationError, match="missing gender"):
        ModelStructure(
            regions=[Region("A", 10, 10)],
            groups=[
                RiskGroup("wom", genders=("f",)),
                RiskGroup("ref", genders=("m",)),
            ],
            reference_group="ref",
        )
    with pytest.raises(ConfigurationError, match="not in catalog"):
        ModelStructure(
            regions=[Region("A", 10, 10)],
            groups=[RiskGroup("gp", genders=("m", "f"))],
            reference_group="other",
        )


def test_invalid_region_and_group_definitions():
    with pytest.raises(ConfigurationError):
        Region("A", pop_male=0, pop_female=5)
    with pytest.raises(ConfigurationError):
        RiskGroup("x", genders=())
    with pytest.raises(ConfigurationError):
        RiskGroup("x", genders=("m", "q"))


def test_stratum_key_and_str():
    s = Stratum("A", "idu", "f")
    assert s.key == ("A", "idu", "f")
    assert str(s) == "A:idu:f"


def test_bundled_structure_counts(bundled_config):
    st = bundled_config.structure
    assert st.n_strata == 17
    males = [s for s in st.strata if s.gender == "m"]
    females = [s for s in st.strata if s.gender == "f"]
    assert (len(males), len(females)) == (9, 8)
    # reference group closes every simplex
    for _, _, idxs in st.simplex_blocks():
        assert st.strata[idxs[-1]].group == "WST_nonSTI"
