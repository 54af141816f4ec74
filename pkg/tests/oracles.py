"""Independent reference solutions used by several test modules."""
import numpy as np

G = 9.81


def double_pendulum_terms(lengths, masses, radius, theta, omega):
    """Hand-derived Lagrangian of two hinged cylinders (relative angles, hinge axis y).

    Returns mass matrix, velocity-product vector and gravity vector of
    ``M qdd + c + g = tau``.
    """
    (l1, l2), (m1, m2) = lengths, masses
    a1, a2 = l1 / 2, l2 / 2
    i1 = m1 * (3 * radius**2 + l1**2) / 12
    i2 = m2 * (3 * radius**2 + l2**2) / 12
    t1, t2 = theta
    w1, w2 = omega
    c2 = np.cos(t2)
    m11 = i1 + m1 * a1**2 + i2 + m2 * (l1**2 + a2**2 + 2 * l1 * a2 * c2)
    m12 = i2 + m2 * (a2**2 + l1 * a2 * c2)
    m22 = i2 + m2 * a2**2
    h = m2 * l1 * a2 * np.sin(t2)
    c = np.array([-h * (2 * w1 * w2 + w2**2), h * w1**2])
    g = G * np.array([m1 * a1 * np.sin(t1) + m2 * (l1 * np.sin(t1) + a2 * np.sin(t1 + t2)),
                      m2 * a2 * np.sin(t1 + t2)])
    return np.array([[m11, m12], [m12, m22]]), c, g


def double_pendulum_qdd(lengths, masses, radius, theta, omega, tau=(0.0, 0.0)):
    m, c, g = double_pendulum_terms(lengths, masses, radius, theta, omega)
    return np.linalg.solve(m, np.asarray(tau) - c - g)


def rk4(f, x0, dt, n):
    """Classical Runge-Kutta integration of ``x' = f(x)``; returns the final state."""
    x = np.array(x0, dtype=float)
    for _ in range(n):
        k1 = f(x)
        k2 = f(x + 0.5 * dt * k1)
        k3 = f(x + 0.5 * dt * k2)
        k4 = f(x + dt * k3)
        x = x + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return x


def central_difference(fun, p, h):
    """Central finite-difference gradient of a scalar function."""
    p = np.asarray(p, dtype=float)
    g = np.zeros_like(p)
    for i in range(p.size):
        e = np.zeros_like(p)
        e.flat[i] = h
        g.flat[i] = (fun(p + e) - fun(p - e)) / (2 * h)
    return g
