"""Regenerate the frozen storage-decay table in test_device.py.

At zero bias the internal charge obeys the separable ODE

    d(ivd)/dt = -I((1 - r) ivd) / C2

so the time to fall from ivd0 to v is a quadrature.  The value at a given
time is found by root-finding that quadrature in 40-digit arithmetic.

    python tests/oracles/decay_mp.py
"""
import mpmath as mp

from simmons_mp import current

mp.mp.dps = 80
EPS0 = mp.mpf("8.8541878188e-12")  # scipy.constants.epsilon_0


def cell(k_mid, d_mid, area="0.25", k_out=50, d_out=6):
    a = mp.mpf(area) * mp.mpf("1e-12")
    c1 = EPS0 * k_out * a / (mp.mpf(d_out) * mp.mpf("1e-9"))
    c2 = EPS0 * mp.mpf(k_mid) * a / (mp.mpf(d_mid) * mp.mpf("1e-9"))
    c0 = 1 / (2 / c1 + 1 / c2)
    return c2, c0 / c2


def time_to(v, v0, k_mid, d_mid):
    c2, r = cell(k_mid, d_mid)

    def integrand(s):
        u = mp.exp(s)
        return c2 * u / current((1 - r) * u, "0.2", d_mid, "0.25")
    return mp.quad(integrand, [mp.log(v), mp.log(v0)])


def ivd_at(t, v0, k_mid, d_mid):
    t = mp.mpf(t)
    lo, hi = mp.mpf("-60"), mp.log(v0)
    for _ in range(200):  # bisection in log(ivd): down to 1e-26 V
        mid = (lo + hi) / 2
        if time_to(mp.exp(mid), v0, k_mid, d_mid) > t:
            lo = mid
        else:
            hi = mid
        if hi - lo < mp.mpf("1e-14"):
            break
    return mp.exp((lo + hi) / 2)


CASES = ((3.9, 8, "1.0", ("1e-6", "1", "10", "100", "1000")),
         (3.9, 10, "2.0", ("1e-9", "1e-3", "1", "1e3", "1e6")),
         (7.5, 10, "1.5", ("1e-3", "1", "1e3", "1e5")))

if __name__ == "__main__":
    for k, d, v0, times in CASES:
        for t in times:
            print(f"    ({k}, {d}, {v0}, {t}, {mp.nstr(ivd_at(t, mp.mpf(v0), k, d), 15)}),")
