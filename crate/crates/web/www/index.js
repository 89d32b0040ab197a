import init, { augment, vote, trajectory } from "./pkg/trm_lab_web.js";

const PALETTE = ["#000", "#0074d9", "#ff4136", "#2ecc40", "#ffdc00",
  "#aaa", "#f012be", "#ff851b", "#7fdbff", "#870c25"];

const $ = (id) => document.getElementById(id);

function drawGrid(rows, caption) {
  const fig = document.createElement("figure");
  const g = document.createElement("div");
  g.className = "grid";
  g.style.gridTemplateColumns = `repeat(${rows[0]?.length ?? 0}, 14px)`;
  for (const row of rows) {
    for (const c of row) {
      const cell = document.createElement("div");
      cell.style.background = PALETTE[c];
      g.appendChild(cell);
    }
  }
  fig.appendChild(g);
  const cap = document.createElement("figcaption");
  cap.textContent = caption;
  fig.appendChild(cap);
  return fig;
}

function run(outId, fn) {
  const out = $(outId);
  out.replaceChildren();
  try {
    fn(out);
  } catch (e) {
    const p = document.createElement("p");
    p.className = "err";
    p.textContent = e.message ?? String(e);
    out.appendChild(p);
  }
}

await init();

$("aug-run").onclick = () => run("aug-out", (out) => {
  const grid = $("grid").value;
  const v = JSON.parse(augment(grid, Number($("aug-seed").value)));
  out.append(
    drawGrid(JSON.parse(grid), "original"),
    drawGrid(v.rows, `dihedral ${v.dihedral}, offset (${v.dy}, ${v.dx})`),
    drawGrid(v.restored, v.round_trip_ok ? "restored (exact)" : "restored (MISMATCH)"),
  );
  const p = document.createElement("p");
  p.textContent = `colors: ${v.colors.map((to, from) => `${from}→${to}`).join(" ")}`;
  out.appendChild(p);
});

$("vote-run").onclick = () => run("vote-out", (out) => {
  const v = JSON.parse(vote($("cands").value));
  out.appendChild(drawGrid(v.winner, `winner, margin ${v.margin} of ${v.total}`));
  for (const [g, n] of v.counts) out.appendChild(drawGrid(g, `${n} vote(s)`));
});

$("traj-run").onclick = () => run("traj-out", (out) => {
  const v = JSON.parse(trajectory($("grid").value,
    Number($("traj-steps").value), Number($("traj-seed").value)));
  v.steps.forEach((g, i) => out.appendChild(drawGrid(g, `step ${i + 1}: ${v.changed[i]} changed`)));
});
