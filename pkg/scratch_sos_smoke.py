import numpy as np
from gamesteer.poly import VarSpace, Polynomial, poly_from_text
from gamesteer import sdp, sos

sp1 = VarSpace(("x",))

# 1. x^2 + 1 is SOS on R, d=2
prog = sos.SosProgram(sp1)
dom = sos.SemialgebraicSet(sp1)
expr = Polynomial(sp1, {(2,): 1.0, (0,): 1.0})
prog.add_nonneg_on(expr, dom, 2)
prob = prog.compile()
sol = sdp.solve(prob, sdp.SolveOptions())
coeffs, cert = prog.extract(sol)
print("1) x^2+1 SOS:", sol.status, "gram dim", cert.constraints[0].gram_sigma0.shape,
      "delta", cert.delta_achieved)
assert sol.status == "Solved"
assert cert.constraints[0].gram_sigma0.shape == (2, 2)
assert cert.delta_achieved <= 1e-7, cert.delta_achieved

# 2. x >= 0 on {x >= 0}, d=2
prog = sos.SosProgram(sp1)
dom = sos.SemialgebraicSet(sp1, inequalities=[Polynomial(sp1, {(1,): 1.0})])
prog.add_nonneg_on(Polynomial(sp1, {(1,): 1.0}), dom, 2)
sol = sdp.solve(prog.compile(), sdp.SolveOptions())
coeffs, cert = prog.extract(sol)
print("2) x on {x>=0}:", sol.status, "delta", cert.delta_achieved)
assert sol.status == "Solved" and cert.delta_achieved <= 1e-6

# 3. 1 - x^2 on [-1, 1], d=2
prog = sos.SosProgram(sp1)
dom = sos.SemialgebraicSet(sp1, inequalities=[
    Polynomial(sp1, {(0,): 1.0, (1,): -1.0}),
    Polynomial(sp1, {(0,): 1.0, (1,): 1.0})])
prog.add_nonneg_on(Polynomial(sp1, {(0,): 1.0, (2,): -1.0}), dom, 2)
sol = sdp.solve(prog.compile(), sdp.SolveOptions())
coeffs, cert = prog.extract(sol)
print("3) 1-x^2 on [-1,1]:", sol.status, "delta", cert.delta_achieved)
assert sol.status == "Solved" and cert.delta_achieved <= 1e-6

# 4. -1 is not SOS -> infeasible
prog = sos.SosProgram(sp1)
dom = sos.SemialgebraicSet(sp1)
prog.add_nonneg_on(Polynomial(sp1, {(0,): -1.0}), dom, 2)
sol = sdp.solve(prog.compile(), sdp.SolveOptions(max_iters=20000))
print("4) -1 SOS:", sol.status)
assert sol.status != "Solved"

# 5. LSQ objective vs normal equations, with decision polynomial
#    fit p(x) = c0 + c1 x to residuals at points, overdetermined inconsistent
prog = sos.SosProgram(sp1)
p = prog.declare_poly(1)
pts = [0.0, 1.0, 2.0, 3.0]
targ = [0.0, 1.0, 1.0, 3.0]
for x, t in zip(pts, targ):
    prog.add_residual(p.eval_lincoeff([x]), t)
prob = prog.compile()
sol = sdp.solve(prob, sdp.SolveOptions())
coeffs, cert = prog.extract(sol)
A = np.array([[1.0, x] for x in pts])
t = np.array(targ)
chat, res, *_ = np.linalg.lstsq(A, t, rcond=None)
# layout: decisions ordered by monomial_basis(1, 1) = [1, x]
obj = sol.objective
print("5) LSQ:", sol.status, "coeffs", coeffs, "oracle", chat,
      "obj", obj, "oracle resid", float(res[0]))
assert sol.status == "Solved"
assert np.allclose(sorted(coeffs), sorted(chat), atol=1e-5), (coeffs, chat)
assert abs(obj - float(res[0])) <= 1e-5

# 6. equality-multiplier path: x >= 0 on {x^2 = x} (x in {0,1}), d=2
prog = sos.SosProgram(sp1)
dom = sos.SemialgebraicSet(sp1, equalities=[Polynomial(sp1, {(2,): 1.0, (1,): -1.0})])
prog.add_nonneg_on(Polynomial(sp1, {(1,): 1.0}), dom, 2)
sol = sdp.solve(prog.compile(), sdp.SolveOptions())
coeffs, cert = prog.extract(sol)
print("6) x on {x^2=x}:", sol.status, "q:", cert.constraints[0].q_polys)
assert sol.status == "Solved"

# 7. identity: declare p deg 1, require p - (2 + 3x) == 0, decisions pinned
prog = sos.SosProgram(sp1)
p = prog.declare_poly(1)
prog.add_poly_identity(p - sos.AffinePoly.from_poly(poly_from_text(sp1, "2*x^0 + 3*x^1")))
prog.add_residual(p.eval_lincoeff([0.0]), 0.0)  # objective to make it a well-posed SDP
sol = sdp.solve(prog.compile(), sdp.SolveOptions())
coeffs, cert = prog.extract(sol)
print("7) identity pin:", sol.status, coeffs)
assert np.allclose(sorted(coeffs), [2.0, 3.0], atol=1e-6)

# 8. determinism
prog1 = sos.SosProgram(sp1)
prog1.add_nonneg_on(Polynomial(sp1, {(2,): 1.0, (0,): 1.0}), sos.SemialgebraicSet(sp1), 4)
pa = prog1.compile()
prog2 = sos.SosProgram(sp1)
prog2.add_nonneg_on(Polynomial(sp1, {(2,): 1.0, (0,): 1.0}), sos.SemialgebraicSet(sp1), 4)
pb = prog2.compile()
assert (pa.A != pb.A).nnz == 0 and np.array_equal(pa.b, pb.b) and np.array_equal(pa.c, pb.c)
print("8) deterministic compile ok")

print("ALL SOS SMOKE OK")
