/**
 * three.js scene construction from server-provided display geometry.
 *
 * Pure object building (no renderer, no WebGL), so it is unit-testable
 * headlessly; the browser entry point attaches the returned group to a
 * renderer.  Units are mm throughout; airways and vessels are drawn as
 * capsule-ish cylinders between their endpoints.
 */
import * as THREE from "three";

import type { PlanSummary, SceneGeometry, Vec3 } from "./protocol.js";

const COLORS = {
  pleura: 0x8899aa,
  airway: 0xddaa66,
  vessel: 0xcc4444,
  target: 0x44cc66,
  fiducial: 0xeeee44,
  plan: 0x4488ee,
  selected: 0xffffff,
  tip: 0x22ddff,
};

function v(p: Vec3): THREE.Vector3 {
  return new THREE.Vector3(p[0], p[1], p[2]);
}

function cylinderBetween(
  a: Vec3,
  b: Vec3,
  radius: number,
  color: number,
): THREE.Mesh {
  const start = v(a);
  const end = v(b);
  const length = start.distanceTo(end);
  const geom = new THREE.CylinderGeometry(radius, radius, length, 10, 1);
  const mesh = new THREE.Mesh(
    geom,
    new THREE.MeshLambertMaterial({ color }),
  );
  mesh.position.copy(start.clone().add(end).multiplyScalar(0.5));
  mesh.quaternion.setFromUnitVectors(
    new THREE.Vector3(0, 1, 0),
    end.clone().sub(start).normalize(),
  );
  return mesh;
}

export function buildAnatomy(geometry: SceneGeometry): THREE.Group {
  const group = new THREE.Group();
  group.name = "anatomy";

  const pleura = new THREE.Mesh(
    new THREE.SphereGeometry(1, 24, 16),
    new THREE.MeshLambertMaterial({
      color: COLORS.pleura,
      transparent: true,
      opacity: 0.15,
    }),
  );
  pleura.name = "pleura";
  pleura.position.copy(v(geometry.pleura.center));
  pleura.scale.copy(v(geometry.pleura.semi_axes));
  group.add(pleura);

  for (const [kind, capsules, color] of [
    ["airway", geometry.airways, COLORS.airway],
    ["vessel", geometry.vessels, COLORS.vessel],
  ] as const) {
    for (const c of capsules) {
      const mesh = cylinderBetween(c.a, c.b, c.r, color);
      mesh.name = kind;
      group.add(mesh);
    }
  }

  for (const region of geometry.target_regions) {
    const size = v(region.hi).sub(v(region.lo));
    const box = new THREE.Mesh(
      new THREE.BoxGeometry(size.x, size.y, size.z),
      new THREE.MeshLambertMaterial({
        color: COLORS.target,
        transparent: true,
        opacity: 0.3,
      }),
    );
    box.name = "target_region";
    box.position.copy(v(region.lo).add(v(region.hi)).multiplyScalar(0.5));
    group.add(box);
  }

  for (const f of geometry.fiducials) {
    const marker = new THREE.Mesh(
      new THREE.SphereGeometry(2.0, 8, 6),
      new THREE.MeshLambertMaterial({ color: COLORS.fiducial }),
    );
    marker.name = "fiducial";
    marker.position.copy(v(f));
    group.add(marker);
  }
  return group;
}

export function buildPathLine(
  points: Vec3[],
  selected: boolean,
): THREE.Line {
  const geom = new THREE.BufferGeometry().setFromPoints(points.map(v));
  const line = new THREE.Line(
    geom,
    new THREE.LineBasicMaterial({
      color: selected ? COLORS.selected : COLORS.plan,
    }),
  );
  line.name = selected ? "selected_path" : "candidate_path";
  return line;
}

export function buildPlanMarkers(plans: PlanSummary[]): THREE.Group {
  const group = new THREE.Group();
  group.name = "plan_markers";
  for (const plan of plans) {
    const marker = new THREE.Mesh(
      new THREE.SphereGeometry(1.5, 8, 6),
      new THREE.MeshLambertMaterial({ color: COLORS.plan }),
    );
    marker.name = `piercing_${plan.index}`;
    marker.position.copy(v(plan.piercing_point));
    group.add(marker);
  }
  return group;
}

export function buildTipMarker(): THREE.Mesh {
  const tip = new THREE.Mesh(
    new THREE.SphereGeometry(1.0, 8, 6),
    new THREE.MeshLambertMaterial({ color: COLORS.tip }),
  );
  tip.name = "tip";
  return tip;
}

export function updateTip(tip: THREE.Object3D, position: Vec3): void {
  tip.position.copy(v(position));
}
