"""Drive the autopilot around the smoke track and watch the uplink channel.

Prints, every few slots, where the car is, the channel gain and the transmit
power the base station needs to decode at the SNR threshold. The last table
shows how quickly the channel decorrelates with displacement.

    python demos/channel_walk.py
"""

import numpy as np

from latentlink import chansim
from latentlink.chansim import ScattererField, channel_at, smoke_radio
from latentlink.envsim import CarEnv, EnvSpec, autopilot

radio = smoke_radio()
field = ScattererField.generate(7, radio)
env = CarEnv(EnvSpec(frame_size=32, max_steps=120))
env.reset(0)

print("slot      x       y   gain(dB)  required(W)  feasible")
while not env.done:
    st = env.state
    snap = channel_at(st.position, st.step_index, field, radio)
    rho = chansim.required_power(snap.g, radio.snr_threshold, radio.noise_power)
    if st.step_index % 8 == 0:
        print(f"{st.step_index:4d} {st.position[0]:7.2f} {st.position[1]:7.2f} {10 * np.log10(snap.gain):9.2f}"
              f" {rho:12.5f}  {chansim.feasible(rho, radio)}")
    env.step(autopilot(st, env.spec))

lam = radio.wavelength
g0 = channel_at((10.0, -20.0), 0, field, radio).g
print("\nshift (wavelengths)  |correlation|")
for frac in (1 / 16, 1 / 4, 1, 4, 16):
    g = channel_at((10.0 + frac * lam, -20.0), 0, field, radio).g
    print(f"{frac:19.4g}  {chansim.correlation(g0, g):.3f}")
