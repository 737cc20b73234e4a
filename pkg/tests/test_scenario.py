"""Tests for scenario documents and saved message profiles."""

import copy
import json

import numpy as np
import pytest

from mechanism.errors import DimensionMismatch, InvalidHelper, ScenarioError
from mechanism.mech_central import construct_ne
from mechanism.mech_dist import construct_ne_dist
from mechanism.scenario import load_profile, load_scenario, parse_scenario, profile_from_doc, save_profile

from conftest import FIXTURE


@pytest.fixture
def doc():
    return json.loads(FIXTURE.read_text())


class TestScenario:
    def test_fixture_blocks(self, scenario):
        assert scenario.name == 'three_user_two_day'
        assert scenario.network.phi == (1, 0, 1)
        assert scenario.learning.config.alpha == 0.1
        assert scenario.learning.config.max_iters == 100
        assert scenario.learning.r_hi.shape == (3, 2)

    def test_network_without_phi_uses_lowest_index(self, doc):
        del doc['network']['phi']
        assert parse_scenario(doc).network.phi == (1, 0, 1)

    def test_helper_outside_neighborhood(self, doc):
        doc['network']['phi'] = {'1': 3, '2': 1, '3': 2}
        with pytest.raises(InvalidHelper):
            parse_scenario(doc)

    def test_malformed_edges(self, doc):
        doc['network']['edges'] = [[1]]
        with pytest.raises(ScenarioError):
            parse_scenario(doc)

    def test_learning_bounds_shape(self, doc):
        doc['learning']['bounds']['lo'] = [[0.1, 0.2]]
        with pytest.raises(DimensionMismatch):
            parse_scenario(doc)

    def test_optional_blocks(self, doc):
        del doc['network'], doc['learning']
        scenario = parse_scenario(doc, name='bare')
        assert scenario.network is None
        assert scenario.learning.config.alpha is None
        assert scenario.learning.r_lo is None

    def test_document_must_be_object(self):
        with pytest.raises(ScenarioError):
            parse_scenario([1, 2, 3])

    def test_invalid_json(self, tmp_path):
        path = tmp_path / 'broken.json'
        path.write_text('{')
        with pytest.raises(ScenarioError):
            load_scenario(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            load_scenario(tmp_path / 'absent.json')


class TestProfiles:
    def test_central_profile_file(self, inst, solution, tmp_path):
        m = construct_ne(inst, solution)
        path = tmp_path / 'central.json'
        save_profile(path, m)
        assert json.loads(path.read_text())['kind'] == 'central'
        assert load_profile(path, inst).equals(m)

    def test_distributed_profile_file(self, inst, network, solution, tmp_path):
        m = construct_ne_dist(inst, network, solution)
        path = tmp_path / 'dist.json'
        save_profile(path, m)
        entries = json.loads(path.read_text())['nu_summary']
        assert {'from': 2, 'to': 1} == {k: entries[1][k] for k in ('from', 'to')}
        loaded = load_profile(path, inst)
        np.testing.assert_array_equal(loaded.nu_summary[(1, 0)], m.nu_summary[(1, 0)])

    def test_profile_for_another_instance(self, inst, solution):
        doc = {'kind': 'central', 'y': np.zeros((2, 2)).tolist(), 'q': np.zeros((2, 7)).tolist(),
               's': np.zeros((2, 2)).tolist(), 'beta': np.zeros((2, 2)).tolist()}
        with pytest.raises(DimensionMismatch):
            profile_from_doc(doc, inst)

    def test_unknown_kind(self, inst):
        with pytest.raises(ScenarioError):
            profile_from_doc({'kind': 'hybrid'}, inst)

    def test_missing_field(self, inst):
        with pytest.raises(ScenarioError):
            profile_from_doc({'kind': 'central', 'y': [[0.0, 0.0]]}, inst)

    def test_document_is_not_modified(self, inst, solution):
        doc = {'kind': 'central', 'y': solution.x.tolist(), 'q': np.zeros((3, 7)).tolist(),
               's': np.zeros((3, 2)).tolist(), 'beta': solution.x.tolist()}
        before = copy.deepcopy(doc)
        profile_from_doc(doc, inst)
        assert doc == before
