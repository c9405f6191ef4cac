"""Closed-form derivatives of R3 log(R+R3) - R; generated by tools/gen_bjet.py, do not edit."""

import math

import numba


@numba.njit(cache=True, fastmath=False)
def b_jet(r1, r2, r3, out):
    """Fill ``out[0:35]`` with the value and all derivatives of order 1-4 (sorted index tuples)."""
    Rs = math.sqrt(r1 * r1 + r2 * r2 + r3 * r3)
    if r3 >= 0.0:
        W = Rs + r3
    else:
        W = (r1 * r1 + r2 * r2) / (Rs - r3)
    LW = math.log(W)
    t0 = 1/W
    t1 = r1*t0
    t2 = r2*t0
    t3 = Rs*W
    t4 = r1**2
    t5 = 1/Rs
    t6 = W**2
    t7 = 1/t6
    t8 = t5*t7
    t9 = r1*r2
    t10 = r2**2
    t11 = Rs**2
    t12 = -3*W*t11
    t13 = W*t4
    t14 = Rs*t4
    t15 = t13 + 2*t14
    t16 = W**(-3)
    t17 = Rs**3
    t18 = 1/t17
    t19 = r1*t18
    t20 = t16*t19
    t21 = -W*t11
    t22 = r2*t18
    t23 = t16*t22
    t24 = t18*t7
    t25 = W*t10
    t26 = Rs*t10
    t27 = t25 + 2*t26
    t28 = Rs**4*t6
    t29 = r1**4
    t30 = 2*t3
    t31 = 2*t11
    t32 = t13*t17
    t33 = t4*t6
    t34 = Rs**(-5)
    t35 = t34/W**4
    t36 = 3*t35
    t37 = W*t17
    t38 = -2*t37
    t39 = t11*t6
    t40 = -t39
    t41 = t31*t4
    t42 = t40 + t41
    t43 = t36*t9
    t44 = 3*t3*t4 + 3*t33
    t45 = -3*t37 - 3*t39
    t46 = t16*t34
    t47 = r1*t46
    t48 = t17*t25
    t49 = 6*t10*t4
    t50 = t10*t39
    t51 = 3*t10
    t52 = -t37
    t53 = r2*t46
    t54 = t10*t6
    t55 = t10*t31
    t56 = t40 + t55
    t57 = t3*t51 + 3*t54
    t58 = 3*t34
    t59 = r3*t58
    t60 = r2**4
    out[0] = LW*r3 - Rs
    out[1] = -t1
    out[2] = -t2
    out[3] = LW
    out[4] = t8*(-t3 + t4)
    out[5] = t8*t9
    out[6] = t1*t5
    out[7] = t8*(t10 - t3)
    out[8] = t2*t5
    out[9] = t5
    out[10] = t20*(-t12 - t15)
    out[11] = t23*(-t15 - t21)
    out[12] = t24*(-t13 - t14 - t21)
    out[13] = t20*(-t21 - t27)
    out[14] = -r2*t19*t7*(Rs + W)
    out[15] = -t19
    out[16] = t23*(-t12 - t27)
    out[17] = t24*(-t21 - t25 - t26)
    out[18] = -t22
    out[19] = -r3*t18
    out[20] = t36*(t28 + t29*t30 + t29*t31 + t29*t6 - t31*t33 - 4*t32)
    out[21] = t43*(t30*t4 + t33 + t38 + t42)
    out[22] = t47*(t41 + t44 + t45)
    out[23] = t35*(-t11*t33 + t11*t49 + t28 + t3*t49 - 2*t32 + t33*t51 - 2*t48 - t50)
    out[24] = t53*(t42 + t44 + t52)
    out[25] = t34*(-t11 + 3*t4)
    out[26] = t43*(t10*t30 + t38 + t54 + t56)
    out[27] = t47*(t52 + t56 + t57)
    out[28] = t58*t9
    out[29] = r1*t59
    out[30] = t36*(t28 + t30*t60 + t31*t60 - 4*t48 - 2*t50 + t6*t60)
    out[31] = t53*(t45 + t55 + t57)
    out[32] = t34*(3*t10 - t11)
    out[33] = r2*t59
    out[34] = t34*(3*r3**2 - t11)


INDEX = (
    (),
    (0,),
    (1,),
    (2,),
    (0, 0),
    (0, 1),
    (0, 2),
    (1, 1),
    (1, 2),
    (2, 2),
    (0, 0, 0),
    (0, 0, 1),
    (0, 0, 2),
    (0, 1, 1),
    (0, 1, 2),
    (0, 2, 2),
    (1, 1, 1),
    (1, 1, 2),
    (1, 2, 2),
    (2, 2, 2),
    (0, 0, 0, 0),
    (0, 0, 0, 1),
    (0, 0, 0, 2),
    (0, 0, 1, 1),
    (0, 0, 1, 2),
    (0, 0, 2, 2),
    (0, 1, 1, 1),
    (0, 1, 1, 2),
    (0, 1, 2, 2),
    (0, 2, 2, 2),
    (1, 1, 1, 1),
    (1, 1, 1, 2),
    (1, 1, 2, 2),
    (1, 2, 2, 2),
    (2, 2, 2, 2),
)
