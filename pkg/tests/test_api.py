import json

import pytest
from httpx import ASGITransport, AsyncClient

from app.config import Settings, get_settings
from app.main import app

PREFIX = get_settings().api_v1_prefix


@pytest.fixture
async def client(settings):
    app.dependency_overrides[get_settings] = lambda: settings
    async with AsyncClient(transport=ASGITransport(app=app), base_url="http://test") as ac:
        yield ac
    app.dependency_overrides.clear()


@pytest.fixture
def toy_document(toy_tree_path) -> dict:
    return json.loads(toy_tree_path.read_text())


# ============== Health ==============

async def test_health(client):
    response = await client.get("/health")
    assert response.status_code == 200
    assert response.json() == {"status": "healthy"}


async def test_root(client, settings: Settings):
    body = (await client.get("/")).json()
    assert body["name"] == settings.app_name
    assert body["docs"] == "/docs"


# ============== Divergences and radii ==============

async def test_divergence_catalogue(client):
    response = await client.get(f"{PREFIX}/divergences")
    assert response.status_code == 200
    entries = {e["name"]: e for e in response.json()}
    assert list(entries) == ["mchi2", "kl", "hellinger", "burg", "cvar:kappa,alpha"]
    assert entries["kl"]["sbar"] is None
    assert entries["hellinger"]["sbar"] == 1.0
    assert entries["hellinger"]["feasibility_cuts"] is True
    assert entries["mchi2"]["feasibility_cuts"] is False
    assert entries["mchi2"]["curvature_at_one"] == 2.0


async def test_rho_calibration(client):
    response = await client.post(f"{PREFIX}/rho", json={"divergence": "kl", "n": 2, "confidence": 0.95})
    assert response.status_code == 200
    body = response.json()
    assert body["N"] == 2
    assert body["rho"] == pytest.approx(3.841459 / 4.0, rel=1e-6)

    chi2 = (await client.post(f"{PREFIX}/rho", json={"divergence": "mchi2", "n": 2, "N": 4})).json()
    assert chi2["rho"] == pytest.approx(3.841459 / 4.0, rel=1e-6)


@pytest.mark.parametrize(
    "payload,status",
    [
        ({"divergence": "renyi", "n": 3}, 400),
        ({"divergence": "cvar:0.5,0.9", "n": 3}, 400),
        ({"divergence": "kl", "n": 1}, 422),
    ],
)
async def test_rho_errors(client, payload, status):
    assert (await client.post(f"{PREFIX}/rho", json=payload)).status_code == status


# ============== Solve ==============

async def test_solve_inline_tree(client, toy_document):
    response = await client.post(
        f"{PREFIX}/solve",
        json={"tree": toy_document, "options": {"divergence": "kl", "rho": [0.1], "tol": 1e-4}},
    )
    assert response.status_code == 200
    body = response.json()["body"]
    assert body["status"] == "converged"
    assert body["instance"] == "toy-inventory"
    assert body["seed"] == 20180101
    assert body["lower_bound"] <= body["upper_bound"] + 1e-9
    assert [p["node"] for p in body["policy"]] == list(range(7))
    assert {w["node"] for w in body["worst_case"]} >= {0}


async def test_solve_rejects_an_invalid_tree(client, toy_document):
    toy_document["nodes"][1]["q"] = 0.4
    response = await client.post(f"{PREFIX}/solve", json={"tree": toy_document, "options": {"rho": [0.1]}})
    assert response.status_code == 422
    assert "sum" in response.json()["detail"]


async def test_solve_unknown_divergence(client, toy_document):
    response = await client.post(
        f"{PREFIX}/solve", json={"tree": toy_document, "options": {"divergence": "tv", "rho": [0.1]}}
    )
    assert response.status_code == 400


async def test_solve_needs_one_radius_source(client, toy_document):
    response = await client.post(
        f"{PREFIX}/solve", json={"tree": toy_document, "options": {"rho": [0.1], "confidence": 0.9}}
    )
    assert response.status_code == 422


async def test_verify_inline_tree(client, toy_document, settings: Settings):
    response = await client.post(
        f"{PREFIX}/verify", json={"tree": toy_document, "options": {"divergence": "burg", "rho": [0.2]}}
    )
    assert response.status_code == 200
    body = response.json()["body"]
    assert body["status"] == "PASS"
    assert body["bound_discipline"] is True
    assert body["seed"] == settings.seed
    assert [c["oracle"] for c in body["comparisons"]][-1] == "root_inner_max"
