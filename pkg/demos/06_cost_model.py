#!/usr/bin/env python3
"""Calibrate the ring all-reduce cost model on published throughput rows and
extrapolate to the next pod slice size.

The three smallest slices fit the model; the largest is held out to judge the
prediction.
"""

from minipod.perfmodel import calibrate, predict

ROWS = {
    "b2": [(128, 4096, 57.57, 2.1), (256, 8192, 113.73, 2.6),
           (512, 16384, 227.13, 2.5), (1024, 32768, 451.35, 2.81)],
    "b5": [(128, 4096, 9.76, 0.89), (256, 8192, 19.48, 1.24),
           (512, 16384, 38.55, 1.24), (1024, 32768, 77.44, 1.03)],
}

for name, rows in ROWS.items():
    fit = calibrate(rows[:3])
    print(f"model {name}: fitted per-image compute {fit.per_image_compute_ms:.3f} ms, "
          f"bandwidth {fit.link_bandwidth_bytes_per_ms:.2e} B/ms, "
          f"hop latency {fit.per_hop_latency_ms:.1e} ms")
    print(f"  {'cores':>6} {'batch':>6} {'thr meas':>9} {'thr model':>9} "
          f"{'ar% meas':>8} {'ar% model':>9}")
    for cores, batch, thr, frac in rows:
        pthr, pfrac = predict(fit, cores, batch)
        held_out = " <- held out" if cores == 1024 else ""
        print(f"  {cores:>6} {batch:>6} {thr:>9.2f} {pthr:>9.2f} "
              f"{frac:>8.2f} {pfrac:>9.2f}{held_out}")
    cores, batch, thr, _ = rows[-1]
    pthr, _ = predict(fit, cores, batch)
    print(f"  held-out prediction error: {abs(pthr - thr) / thr * 100:.2f}%\n")

print("throughput scales near-linearly because the bandwidth term of the\n"
      "ring all-reduce saturates at 2*bytes/bw while compute stays constant\n"
      "per core; only the per-hop latency term grows with the ring size.")
