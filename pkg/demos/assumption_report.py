"""Certifying the structural assumptions on the reaction terms.

The well-posedness theory needs growth bounds, a coercive recovery
energy, and monotonicity of the shifted cubic. This script certifies
the default FitzHugh-Nagumo configuration, then shows how the report
catches a model with the stabilizing shift removed.
"""

from tridomain.ionics import IonicModel, certify_assumptions


def main():
    box = ((-10.0, 10.0), (-10.0, 10.0))

    print("default model:")
    rep = certify_assumptions(IonicModel(), v_range=box[0], w_range=box[1])
    print(rep.to_text())

    print("\nmodel with beta1 = 0 (no monotonicity shift):")
    broken = certify_assumptions(IonicModel(beta1=0.0),
                                 v_range=box[0], w_range=box[1])
    print(broken.to_text())


if __name__ == "__main__":
    main()
